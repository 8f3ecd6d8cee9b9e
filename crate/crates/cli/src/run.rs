//! Executes a validated experiment and writes its run directory.
//!
//! Layout (version 1):
//!
//! ```text
//! <out_dir>/
//!   config.toml      verbatim copy of the config
//!   data.csv         training data before standardization (regression runs)
//!   train_curve.csv  epoch, train_loss, val_loss, seconds
//!   fan.csv          predictive samples on the test inputs
//!   metrics.json     deterministic metrics
//!   manifest.json    seed, timings and file list
//! ```

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use postpred::datasets::{self, multimodal_curve, RegressionDataset, Standardizer};
use postpred::evaluation::{self, BimodalityTest, ForecastMetrics, Modality};
use postpred::posterior::{
    compose_per_layer, ConditionalPosterior, HypernetArch, InitSpec, MdnArch, MdnPosterior, PosteriorModel,
    UnconditionedPosterior,
};
use postpred::trainer::{train_with_observer, EpochRecord, TrainReport};
use postpred::{Error, PrimaryModel, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DataSpec, Experiment, ExperimentKind, PosteriorKind, SeriesSource};

pub const LAYOUT_VERSION: u32 = 1;

/// Independent random streams derived from the experiment seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Eval = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Builds the configured posterior around `primary`'s parameter layout.
pub fn build_posterior(
    exp: &Experiment,
    primary: &dyn PrimaryModel,
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn PosteriorModel>> {
    let layout = primary.layout();
    let p = layout.total_len();
    let center = layout.init_theta(rng);
    let spec = &exp.posterior;
    let cond = exp.cond_dim();
    let init = InitSpec {
        theta_center: Some(center.clone()),
        output_scale: Some(spec.init_output_scale),
    };
    let mut post: Box<dyn PosteriorModel> = match spec.kind {
        PosteriorKind::Unconditioned => Box::new(UnconditionedPosterior::new(
            &HypernetArch::parse(&spec.arch, p)?,
            spec.latent,
            &init,
            rng,
        )?),
        PosteriorKind::Conditional => Box::new(ConditionalPosterior::new(
            &HypernetArch::parse(&spec.arch, p)?,
            spec.latent,
            cond,
            &init,
            rng,
        )?),
        PosteriorKind::Mdn => Box::new(MdnPosterior::new(&MdnArch::parse(&spec.arch, p)?, cond, &init, rng)?),
        PosteriorKind::PerLayer | PosteriorKind::PerLayerConditional => {
            let mut parts: Vec<(std::ops::Range<usize>, Box<dyn PosteriorModel>)> = Vec::new();
            for r in layout.layer_ranges() {
                let arch = HypernetArch::parse(&spec.arch, r.len())?;
                let init = InitSpec {
                    theta_center: Some(center[r.clone()].to_vec()),
                    output_scale: Some(spec.init_output_scale),
                };
                let part: Box<dyn PosteriorModel> = if spec.kind == PosteriorKind::PerLayer {
                    Box::new(UnconditionedPosterior::new(&arch, spec.latent, &init, rng)?)
                } else {
                    Box::new(ConditionalPosterior::new(&arch, spec.latent, cond, &init, rng)?)
                };
                parts.push((r, part));
            }
            Box::new(compose_per_layer(parts, p)?)
        }
    };
    if spec.degenerate {
        post.make_degenerate();
    }
    Ok(post)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub experiment: &'static str,
    pub seed: u64,
    pub posterior: PosteriorKind,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub final_train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_val_loss: Option<f64>,
    /// Predictive-mean RMSE on the training inputs, standardized units.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_rmse: Option<f64>,
    /// Test forecast errors in original units.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mape: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mape_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub naive: Option<ForecastMetrics>,
    /// Share of test inputs in (0.35, 0.55) classified bimodal.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bimodal_fraction_overlap: Option<f64>,
    /// Share of test inputs in (0, 0.25) ∪ (0.7, 1) classified unimodal.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unimodal_fraction_outside: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    layout_version: u32,
    experiment: &'static str,
    seed: u64,
    package_version: &'static str,
    files: Vec<&'a str>,
    wall_clock_seconds: f64,
    mean_epoch_seconds: f64,
    epoch_seconds: Vec<f64>,
}

/// Everything a run produced, in memory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: Metrics,
    pub report: TrainReport,
    pub fan: evaluation::PredictiveFan,
    /// Abscissae of the fan rows.
    pub fan_x: Vec<f64>,
    pub out_dir: PathBuf,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn column_values(t: &Tensor) -> Vec<f64> {
    (0..t.shape()[0]).map(|i| t.row(i)[0]).collect()
}

struct Trained {
    primary: Box<dyn PrimaryModel>,
    posterior: Box<dyn PosteriorModel>,
    report: TrainReport,
}

fn fit(exp: &Experiment, data: &RegressionDataset, progress: &mut dyn FnMut(&EpochRecord)) -> Result<Trained> {
    let primary = exp.build_primary();
    let mut init_rng = stream_rng(exp.seed, Stream::Init);
    let mut posterior = build_posterior(exp, primary.as_ref(), &mut init_rng)?;
    let report = train_with_observer(
        primary.as_ref(),
        posterior.as_mut(),
        &exp.likelihood,
        data,
        &exp.train,
        progress,
    )?;
    Ok(Trained {
        primary,
        posterior,
        report,
    })
}

fn base_metrics(exp: &Experiment, report: &TrainReport) -> Metrics {
    Metrics {
        experiment: exp.kind.name(),
        seed: exp.seed,
        posterior: exp.posterior.kind,
        epochs_run: report.epochs.len(),
        best_epoch: report.best_epoch,
        stopped_early: report.stopped_early,
        final_train_loss: report.epochs.last().map_or(f64::NAN, |e| e.train_loss),
        best_val_loss: report.epochs.get(report.best_epoch).and_then(|e| e.val_loss),
        train_rmse: None,
        rmse: None,
        rmse_std: None,
        mape: None,
        mape_std: None,
        naive: None,
        bimodal_fraction_overlap: None,
        unimodal_fraction_outside: None,
    }
}

/// Runs the experiment without touching the filesystem.
pub fn execute(exp: &Experiment, progress: &mut dyn FnMut(&EpochRecord)) -> Result<RunOutcome> {
    match &exp.data {
        DataSpec::Series { .. } => execute_forecast(exp, progress),
        _ => execute_regression(exp, progress),
    }
}

fn execute_regression(exp: &Experiment, progress: &mut dyn FnMut(&EpochRecord)) -> Result<RunOutcome> {
    let mut data_rng = stream_rng(exp.seed, Stream::Data);
    let set = match exp.data {
        DataSpec::Xsinx { n_base, spacing } => datasets::gen_xsinx(n_base, spacing, &mut data_rng),
        DataSpec::Multimodal { n, noise_std, n_test } => datasets::gen_multimodal(n, noise_std, n_test, &mut data_rng),
        DataSpec::Series { .. } => unreachable!("handled by execute_forecast"),
    };
    let std = datasets::standardize(&set.train)?;
    let trained = fit(exp, &std.data, progress)?;
    let (primary, posterior) = (trained.primary.as_ref(), trained.posterior.as_ref());
    let mut eval_rng = stream_rng(exp.seed, Stream::Eval);
    let conditioned = posterior.cond_dim() > 0;

    let train_cond = conditioned.then(|| std.data.features(exp.train.use_labels)).transpose()?;
    let train_fan = evaluation::sample_predictive(
        primary,
        posterior,
        &std.data.x,
        train_cond.as_ref(),
        exp.eval_samples,
        &mut eval_rng,
    )?;
    let train_rmse = evaluation::rmse(train_fan.mean.data(), std.data.y.data())?;

    let test_x = std.x_scaler.apply(&set.test_x)?;
    let fan = match (conditioned, exp.train.use_labels) {
        (true, true) => labeled_fan(primary, posterior, &test_x, exp.eval_samples, &mut eval_rng)?,
        (c, _) => {
            let cond = c.then(|| test_x.clone());
            evaluation::sample_predictive(primary, posterior, &test_x, cond.as_ref(), exp.eval_samples, &mut eval_rng)?
        }
    };

    let mut metrics = base_metrics(exp, &trained.report);
    metrics.train_rmse = Some(train_rmse);
    if matches!(exp.kind, ExperimentKind::MultimodalL1 | ExperimentKind::MultimodalLabeled) {
        let (bi, uni) = modality_fractions(&fan, &set.test_x, &std.y_scaler)?;
        metrics.bimodal_fraction_overlap = Some(bi);
        metrics.unimodal_fraction_outside = Some(uni);
    }
    Ok(RunOutcome {
        metrics,
        report: trained.report,
        fan,
        fan_x: column_values(&test_x),
        out_dir: exp.out_dir.clone(),
    })
}

/// Test-time fan of a label-conditioned posterior: every draw gets its own
/// random label at every input.
fn labeled_fan(
    primary: &dyn PrimaryModel,
    posterior: &dyn PosteriorModel,
    x: &Tensor,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<evaluation::PredictiveFan> {
    let n = x.shape()[0];
    let o = primary.output_dim();
    let mut out = Vec::with_capacity(samples * n * o);
    for _ in 0..samples {
        let labels: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        let cond = Tensor::hcat(&[x, &Tensor::new(vec![n, 1], labels)?])?;
        let draw = evaluation::sample_predictive(primary, posterior, x, Some(&cond), 1, rng)?;
        out.extend_from_slice(draw.samples.data());
    }
    evaluation::PredictiveFan::from_samples(Tensor::new(vec![samples, n, o], out)?)
}

/// Bimodal share inside (0.35, 0.55) and unimodal share in
/// (0, 0.25) ∪ (0.7, 1), judged against the standardized branch values.
pub fn modality_fractions(
    fan: &evaluation::PredictiveFan,
    raw_x: &Tensor,
    y_scaler: &Standardizer,
) -> Result<(f64, f64)> {
    let test = BimodalityTest::default();
    let (mut inside, mut bimodal, mut outside, mut unimodal) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..raw_x.shape()[0] {
        let x = raw_x.row(i)[0];
        let curves = Tensor::new(vec![2, 1], vec![multimodal_curve(x, false), multimodal_curve(x, true)])?;
        let c = y_scaler.apply(&curves)?;
        let m = test.classify(&fan.point(i, 0), (c.data()[0], c.data()[1]));
        if x > 0.35 && x < 0.55 {
            inside += 1;
            bimodal += usize::from(m == Modality::Bimodal);
        } else if (x > 0.0 && x < 0.25) || (x > 0.7 && x < 1.0) {
            outside += 1;
            unimodal += usize::from(m == Modality::Unimodal);
        }
    }
    let frac = |k: usize, n: usize| if n == 0 { f64::NAN } else { k as f64 / n as f64 };
    Ok((frac(bimodal, inside), frac(unimodal, outside)))
}

/// Series, windows and the scalar standardizer fitted on the training span.
pub struct ForecastData {
    pub raw: datasets::WindowedSeries,
    pub scaled: datasets::WindowedSeries,
    pub scaler: Standardizer,
}

pub fn prepare_series(series: &[f64], h_in: usize, h_out: usize, train_fraction: f64) -> Result<ForecastData> {
    let raw = datasets::window_series(series, h_in, h_out)?.with_split(train_fraction)?;
    let span = raw.split + h_in + h_out - 1;
    let scaler = Standardizer::fit_scalar(&series[..span])?;
    let scaled = datasets::WindowedSeries {
        inputs: scaler.apply(&raw.inputs)?,
        targets: scaler.apply(&raw.targets)?,
        split: raw.split,
    };
    Ok(ForecastData { raw, scaled, scaler })
}

pub fn load_series(exp: &Experiment) -> Result<Vec<f64>> {
    let DataSpec::Series { source, .. } = &exp.data else {
        return Err(Error::contract("not a forecasting experiment"));
    };
    Ok(match source {
        SeriesSource::Csv(path) => datasets::load_csv_series(path)?,
        SeriesSource::Synthetic {
            len,
            period,
            amplitude,
            trend,
            noise_std,
        } => {
            let mut rng = stream_rng(exp.seed, Stream::Data);
            datasets::synthetic_seasonal(*len, *period, *amplitude, *trend, *noise_std, &mut rng)
        }
    })
}

fn execute_forecast(exp: &Experiment, progress: &mut dyn FnMut(&EpochRecord)) -> Result<RunOutcome> {
    let DataSpec::Series {
        h_in,
        h_out,
        train_fraction,
        ..
    } = exp.data
    else {
        unreachable!("checked by execute");
    };
    let series = load_series(exp)?;
    let fd = prepare_series(&series, h_in, h_out, train_fraction)?;
    let train_set = fd.scaled.train()?;
    let test_set = fd.scaled.test()?;
    let trained = fit(exp, &train_set, progress)?;
    let (primary, posterior) = (trained.primary.as_ref(), trained.posterior.as_ref());
    let mut eval_rng = stream_rng(exp.seed, Stream::Eval);
    let cond = (posterior.cond_dim() > 0).then(|| test_set.x.clone());
    let fan = evaluation::sample_predictive(primary, posterior, &test_set.x, cond.as_ref(), exp.eval_samples, &mut eval_rng)?
        .map(|t| fd.scaler.invert(t))?;
    let raw_test = fd.raw.test()?;
    let model = evaluation::forecast_metrics(&fan.mean, &raw_test.y)?;
    let naive = evaluation::forecast_metrics(&evaluation::naive_forecasts(&raw_test.x, h_out)?, &raw_test.y)?;

    let mut metrics = base_metrics(exp, &trained.report);
    metrics.rmse = Some(model.rmse);
    metrics.rmse_std = Some(model.rmse_std);
    metrics.mape = Some(model.mape);
    metrics.mape_std = Some(model.mape_std);
    metrics.naive = Some(naive);
    let fan_x = (0..raw_test.len()).map(|i| (fd.raw.split + i) as f64).collect();
    Ok(RunOutcome {
        metrics,
        report: trained.report,
        fan,
        fan_x,
        out_dir: exp.out_dir.clone(),
    })
}

/// Runs the experiment and writes the run directory.
pub fn run_to_dir(exp: &Experiment, config_text: &str, progress: &mut dyn FnMut(&EpochRecord)) -> Result<RunOutcome> {
    let start = Instant::now();
    let outcome = execute(exp, progress)?;
    let dir = &exp.out_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut files = vec!["config.toml", "train_curve.csv", "fan.csv", "metrics.json", "manifest.json"];

    fs::write(dir.join("config.toml"), config_text).map_err(|e| io_err(dir, e))?;
    outcome.report.write_curve_csv(create(&dir.join("train_curve.csv"))?)?;
    outcome.fan.write_csv(&outcome.fan_x, create(&dir.join("fan.csv"))?)?;
    if let Some(train) = regression_training_data(exp)? {
        train.write_csv(create(&dir.join("data.csv"))?)?;
        files.insert(1, "data.csv");
    }
    write_json(&dir.join("metrics.json"), &outcome.metrics)?;
    let epoch_seconds: Vec<f64> = outcome.report.epochs.iter().map(|e| e.seconds).collect();
    let manifest = Manifest {
        layout_version: LAYOUT_VERSION,
        experiment: exp.kind.name(),
        seed: exp.seed,
        package_version: env!("CARGO_PKG_VERSION"),
        files,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        mean_epoch_seconds: outcome.report.mean_epoch_seconds(),
        epoch_seconds,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(outcome)
}

/// The unstandardized training set of a regression experiment.
pub fn regression_training_data(exp: &Experiment) -> Result<Option<RegressionDataset>> {
    let mut rng = stream_rng(exp.seed, Stream::Data);
    Ok(match exp.data {
        DataSpec::Xsinx { n_base, spacing } => Some(datasets::gen_xsinx(n_base, spacing, &mut rng).train),
        DataSpec::Multimodal { n, noise_std, n_test } => {
            Some(datasets::gen_multimodal(n, noise_std, n_test, &mut rng).train)
        }
        DataSpec::Series { .. } => None,
    })
}

/// Dataset kinds accepted by `gen-data`.
pub const GEN_KINDS: &str = "xsinx, multimodal, seasonal";

/// Writes a synthetic dataset as CSV.
pub fn gen_data(kind: &str, out: &Path, seed: u64) -> Result<()> {
    let mut rng = stream_rng(seed, Stream::Data);
    match kind {
        "xsinx" => datasets::gen_xsinx(32, datasets::Spacing::Random, &mut rng).train.write_csv(create(out)?),
        "multimodal" => datasets::gen_multimodal(128, 0.1, 200, &mut rng).train.write_csv(create(out)?),
        "seasonal" => {
            let s = datasets::synthetic_seasonal(2976, 12.0, 10.0, 0.002, 1.0, &mut rng);
            let mut w = csv::Writer::from_writer(create(out)?);
            w.write_record(["value"]).map_err(|e| io_err(out, e))?;
            for v in s {
                w.write_record([v.to_string()]).map_err(|e| io_err(out, e))?;
            }
            w.flush().map_err(|e| io_err(out, e))
        }
        other => Err(Error::contract(format!("unknown dataset {other:?}; expected one of {GEN_KINDS}"))),
    }
}
