//! Minibatched gradient training of posterior parameters φ.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datasets::{random_holdout, tail_holdout, RegressionDataset};
use crate::error::{Error, Result};
use crate::likelihood::{mc_predictive_loss, Likelihood, LossMode};
use crate::posterior::{bind_params, PosteriorModel};
use crate::primary::PrimaryModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
            Optimizer::Sgd { lr } => lr > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// How the validation split is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Holdout {
    /// Seeded random subset.
    #[default]
    Random,
    /// The last examples in data order (for time series).
    Tail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub enabled: bool,
    pub val_fraction: f64,
    /// Epochs without improvement tolerated before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub holdout: Holdout,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self {
            enabled: true,
            val_fraction: 0.1,
            patience: 20,
            min_delta: 1e-4,
            holdout: Holdout::Random,
        }
    }
}

impl EarlyStopping {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mc_samples: usize,
    pub optimizer: Optimizer,
    pub early_stopping: EarlyStopping,
    pub loss_mode: LossMode,
    /// Global gradient-norm ceiling; off when `None`.
    pub clip_norm: Option<f64>,
    /// Append the label column to the conditioning features.
    pub use_labels: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            mc_samples: 10,
            optimizer: Optimizer::adam(0.01),
            early_stopping: EarlyStopping::default(),
            loss_mode: LossMode::NegLogMeanProb,
            clip_norm: None,
            use_labels: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.mc_samples == 0 {
            return Err(Error::contract("epochs, batch_size and mc_samples must all be at least 1"));
        }
        let vf = self.early_stopping.val_fraction;
        if !(0.0..1.0).contains(&vf) {
            return Err(Error::contract(format!("val_fraction {vf} outside [0, 1)")));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::contract(format!("clip_norm must be positive, got {c}")));
            }
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose φ the posterior holds after training.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum::<f64>() / self.epochs.len().max(1) as f64
    }

    /// `epoch,train_loss,val_loss,seconds` rows with a header.
    pub fn write_curve_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_loss", "seconds"])
            .map_err(|e| Error::Io(e.to_string()))?;
        for e in &self.epochs {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([e.epoch.to_string(), e.train_loss.to_string(), val, e.seconds.to_string()])
                .map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shuffled index chunks of at most `batch_size`; the last may be short.
pub fn make_minibatches(n: usize, batch_size: usize, rng: &mut dyn RngCore) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update of `phi` in place.
pub fn adam_step(phi: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, g), m), v) in phi.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Builds the Monte-Carlo predictive loss of one minibatch on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn minibatch_loss(
    tape: &Tape,
    primary: &dyn PrimaryModel,
    posterior: &dyn PosteriorModel,
    vars: &[Var],
    likelihood: &Likelihood,
    x: &Tensor,
    y: &Tensor,
    cond: Option<&Tensor>,
    samples: usize,
    mode: LossMode,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let theta = posterior.sample(tape, vars, cond, samples, rng)?;
    let pred = primary.forward(tape, &theta, x)?;
    let ll = likelihood.mc_log_liks(tape, pred, y, &theta)?;
    mc_predictive_loss(tape, ll, mode)
}

/// Checks that the primary, posterior and data fit together.
pub fn check_compatible(
    primary: &dyn PrimaryModel,
    posterior: &dyn PosteriorModel,
    data: &RegressionDataset,
    use_labels: bool,
) -> Result<()> {
    let p = primary.layout().total_len();
    if posterior.theta_len() != p {
        return Err(Error::contract(format!(
            "posterior output length {} != primary parameter count P = {p}",
            posterior.theta_len()
        )));
    }
    if data.input_dim() != primary.input_dim() || data.output_dim() != primary.output_dim() {
        return Err(Error::contract(format!(
            "data is {}→{}, primary is {}→{}",
            data.input_dim(),
            data.output_dim(),
            primary.input_dim(),
            primary.output_dim()
        )));
    }
    let want = posterior.cond_dim();
    if want > 0 {
        let have = data.input_dim() + if use_labels { 1 } else { 0 };
        if use_labels && data.labels.is_none() {
            return Err(Error::contract("label conditioning requested but the data has no labels"));
        }
        if have != want {
            return Err(Error::contract(format!(
                "posterior conditions on {want} features, data provides {have}"
            )));
        }
    }
    Ok(())
}

const VAL_STREAM: u64 = 0x5eed_0f_7a1;

struct Split {
    x: Tensor,
    y: Tensor,
    cond: Option<Tensor>,
}

impl Split {
    fn of(data: &RegressionDataset, conditioned: bool, use_labels: bool) -> Result<Self> {
        Ok(Self {
            x: data.x.clone(),
            y: data.y.clone(),
            cond: if conditioned { Some(data.features(use_labels)?) } else { None },
        })
    }

    fn len(&self) -> usize {
        self.x.shape()[0]
    }

    fn rows(&self, idx: &[usize]) -> Result<Split> {
        Ok(Split {
            x: self.x.select_rows(idx)?,
            y: self.y.select_rows(idx)?,
            cond: self.cond.as_ref().map(|c| c.select_rows(idx)).transpose()?,
        })
    }
}

/// Mean loss over `split` in chunks, without gradients.
fn evaluate_loss(
    primary: &dyn PrimaryModel,
    posterior: &dyn PosteriorModel,
    likelihood: &Likelihood,
    split: &Split,
    cfg: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let n = split.len();
    let mut total = 0.0;
    let order: Vec<usize> = (0..n).collect();
    for chunk in order.chunks(cfg.batch_size) {
        let part = split.rows(chunk)?;
        let tape = Tape::new();
        let vars: Vec<Var> = posterior.params().into_iter().map(|p| tape.constant(p.value.clone())).collect();
        let loss = minibatch_loss(
            &tape,
            primary,
            posterior,
            &vars,
            likelihood,
            &part.x,
            &part.y,
            part.cond.as_ref(),
            cfg.mc_samples,
            cfg.loss_mode,
            rng,
        )?;
        total += tape.item(loss)? * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

fn snapshot(posterior: &dyn PosteriorModel) -> Vec<Tensor> {
    posterior.params().into_iter().map(|p| p.value.clone()).collect()
}

fn restore(posterior: &mut dyn PosteriorModel, values: &[Tensor]) {
    for (p, v) in posterior.params_mut().into_iter().zip(values) {
        p.value = v.clone();
    }
}

/// Trains `posterior` in place and reports per-epoch losses.
pub fn train(
    primary: &dyn PrimaryModel,
    posterior: &mut dyn PosteriorModel,
    likelihood: &Likelihood,
    data: &RegressionDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with_observer(primary, posterior, likelihood, data, cfg, &mut |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_observer(
    primary: &dyn PrimaryModel,
    posterior: &mut dyn PosteriorModel,
    likelihood: &Likelihood,
    data: &RegressionDataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    likelihood.validate()?;
    check_compatible(primary, posterior, data, cfg.use_labels)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let es = cfg.early_stopping;
    let conditioned = posterior.cond_dim() > 0;
    let all = Split::of(data, conditioned, cfg.use_labels)?;
    let (train_idx, val_idx) = if es.enabled {
        match es.holdout {
            Holdout::Random => random_holdout(data.len(), es.val_fraction, &mut rng),
            Holdout::Tail => tail_holdout(data.len(), es.val_fraction),
        }
    } else {
        ((0..data.len()).collect(), Vec::new())
    };
    let train_set = all.rows(&train_idx)?;
    let val_set = if val_idx.is_empty() { None } else { Some(all.rows(&val_idx)?) };

    let mut states: Vec<AdamState> = posterior.params().iter().map(|p| AdamState::new(p.value.len())).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut bad = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut sum = 0.0;
        for (bi, batch) in make_minibatches(train_set.len(), cfg.batch_size, &mut rng).iter().enumerate() {
            let part = train_set.rows(batch)?;
            let tape = Tape::new();
            let vars = bind_params(&tape, posterior);
            let loss = minibatch_loss(
                &tape,
                primary,
                posterior,
                &vars,
                likelihood,
                &part.x,
                &part.y,
                part.cond.as_ref(),
                cfg.mc_samples,
                cfg.loss_mode,
                &mut rng,
            )?;
            let value = tape.item(loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi, value });
            }
            tape.backward(loss)?;
            let mut grads: Vec<Option<Tensor>> = vars.iter().map(|&v| tape.grad(v)).collect();
            if grads.iter().flatten().any(|g| !g.all_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    value: f64::NAN,
                });
            }
            if let Some(max) = cfg.clip_norm {
                let norm = grads
                    .iter()
                    .flatten()
                    .flat_map(|g| g.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    let s = max / norm;
                    for g in grads.iter_mut().flatten() {
                        g.data_mut().iter_mut().for_each(|v| *v *= s);
                    }
                }
            }
            for ((p, g), st) in posterior.params_mut().into_iter().zip(&grads).zip(&mut states) {
                let (Some(g), false) = (g, p.frozen) else { continue };
                match cfg.optimizer {
                    Optimizer::Adam { lr, beta1, beta2, eps } => {
                        adam_step(p.value.data_mut(), g.data(), st, lr, beta1, beta2, eps);
                    }
                    Optimizer::Sgd { lr } => {
                        for (v, d) in p.value.data_mut().iter_mut().zip(g.data()) {
                            *v -= lr * d;
                        }
                    }
                }
            }
            sum += value * batch.len() as f64;
        }
        let train_loss = sum / train_set.len() as f64;

        let val_loss = match &val_set {
            Some(v) => {
                let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VAL_STREAM);
                Some(evaluate_loss(primary, posterior, likelihood, v, cfg, &mut vrng)?)
            }
            None => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&record);
        records.push(record);

        if let Some(vl) = val_loss {
            let improved = best.as_ref().is_none_or(|(b, _, _)| vl < b - es.min_delta);
            if improved {
                best = Some((vl, epoch, snapshot(posterior)));
                bad = 0;
            } else {
                bad += 1;
                if bad > es.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let best_epoch = match best {
        Some((_, e, phi)) => {
            restore(posterior, &phi);
            e
        }
        None => records.len() - 1,
    };
    Ok(TrainReport {
        epochs: records,
        best_epoch,
        stopped_early,
    })
}
