//! Predictive sampling, summary statistics and forecast metrics.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::posterior::{sample_theta, PosteriorModel};
use crate::primary::{Grouping, PrimaryModel, ThetaBatch};
use crate::tensor::Tensor;

/// Predictive samples over N test inputs with per-point summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveFan {
    /// `[L, N, o]`.
    pub samples: Tensor,
    /// `[N, o]` summaries.
    pub mean: Tensor,
    pub q025: Tensor,
    pub q50: Tensor,
    pub q975: Tensor,
}

/// Linear-interpolation quantile of sorted data (R type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl PredictiveFan {
    /// Summarizes samples laid out `[L, N, o]`.
    pub fn from_samples(samples: Tensor) -> Result<Self> {
        if samples.rank() != 3 {
            return Err(Error::contract("fan samples must be [L, N, o]"));
        }
        let (l, n, o) = (samples.shape()[0], samples.shape()[1], samples.shape()[2]);
        let mut mean = vec![0.0; n * o];
        let mut q = [vec![0.0; n * o], vec![0.0; n * o], vec![0.0; n * o]];
        let mut col = vec![0.0; l];
        for j in 0..n * o {
            for (s, c) in col.iter_mut().enumerate() {
                *c = samples.data()[s * n * o + j];
            }
            mean[j] = col.iter().sum::<f64>() / l as f64;
            col.sort_by(f64::total_cmp);
            for (qi, p) in [0.025, 0.5, 0.975].into_iter().enumerate() {
                q[qi][j] = quantile_sorted(&col, p);
            }
        }
        let [q025, q50, q975] = q;
        Ok(Self {
            mean: Tensor::new(vec![n, o], mean)?,
            q025: Tensor::new(vec![n, o], q025)?,
            q50: Tensor::new(vec![n, o], q50)?,
            q975: Tensor::new(vec![n, o], q975)?,
            samples,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn num_points(&self) -> usize {
        self.samples.shape()[1]
    }

    /// The L sampled values at point `i`, output `k`.
    pub fn point(&self, i: usize, k: usize) -> Vec<f64> {
        let (n, o) = (self.samples.shape()[1], self.samples.shape()[2]);
        (0..self.num_samples()).map(|s| self.samples.data()[s * n * o + i * o + k]).collect()
    }

    /// Maps every sample and summary through `f` (e.g. destandardization).
    pub fn map(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Self> {
        let (l, n, o) = (self.samples.shape()[0], self.samples.shape()[1], self.samples.shape()[2]);
        let flat = self.samples.clone().reshape([l * n, o])?;
        Self::from_samples(f(&flat)?.reshape([l, n, o])?)
    }

    /// Rows of `x, [output,] sample_0.., mean, q025, q50, q975`; the output
    /// column appears only for multi-output fans.
    pub fn write_csv<W: std::io::Write>(&self, x: &[f64], out: W) -> Result<()> {
        let (l, n, o) = (self.samples.shape()[0], self.samples.shape()[1], self.samples.shape()[2]);
        if x.len() != n {
            return Err(Error::contract(format!("{} x values for {n} fan points", x.len())));
        }
        let io = |e: csv::Error| Error::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["x".to_string()];
        if o > 1 {
            header.push("output".into());
        }
        header.extend((0..l).map(|s| format!("sample_{s}")));
        header.extend(["mean", "q025", "q50", "q975"].map(String::from));
        w.write_record(&header).map_err(io)?;
        for (i, xv) in x.iter().enumerate() {
            for k in 0..o {
                let mut rec = vec![xv.to_string()];
                if o > 1 {
                    rec.push(k.to_string());
                }
                rec.extend(self.point(i, k).iter().map(f64::to_string));
                for t in [&self.mean, &self.q025, &self.q50, &self.q975] {
                    rec.push(t.data()[i * o + k].to_string());
                }
                w.write_record(&rec).map_err(io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Test inputs per forward pass when sampling a fan.
pub const EVAL_CHUNK: usize = 128;

/// Draws `samples` predictions for every row of `x`.
///
/// An unconditioned posterior draws one set of θ shared by all inputs, so
/// each sample is a coherent curve. Conditioned posteriors receive `cond`
/// and draw θ per input.
pub fn sample_predictive(
    primary: &dyn PrimaryModel,
    posterior: &dyn PosteriorModel,
    x: &Tensor,
    cond: Option<&Tensor>,
    samples: usize,
    rng: &mut dyn RngCore,
) -> Result<PredictiveFan> {
    let n = x.shape()[0];
    let o = primary.output_dim();
    let shared = if posterior.cond_dim() == 0 {
        Some(sample_theta(posterior, None, samples, rng)?.0)
    } else {
        None
    };
    let mut out = vec![0.0; samples * n * o];
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let xc = x.select_rows(chunk)?;
        let tape = Tape::new();
        let theta = match &shared {
            Some(t) => ThetaBatch {
                values: tape.constant(t.clone()),
                grouping: Grouping::Shared { samples },
            },
            None => {
                let c = cond.ok_or_else(|| Error::contract("conditioned posterior needs features"))?;
                let cc = c.select_rows(chunk)?;
                let vars: Vec<Var> = posterior.params().into_iter().map(|p| tape.constant(p.value.clone())).collect();
                posterior.sample(&tape, &vars, Some(&cc), samples, rng)?
            }
        };
        let pred = tape.value(primary.forward(&tape, &theta, &xc)?);
        let b = chunk.len();
        for s in 0..samples {
            let src = &pred.data()[s * b * o..(s + 1) * b * o];
            let start = s * n * o + chunk[0] * o;
            out[start..start + b * o].copy_from_slice(src);
        }
    }
    PredictiveFan::from_samples(Tensor::new(vec![samples, n, o], out)?)
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Metric(format!(
            "prediction length {} vs target length {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let sse: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Mean absolute percentage error over nonzero targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    pub value: f64,
    /// Zero targets left out of the average.
    pub excluded: usize,
}

pub fn mape(pred: &[f64], target: &[f64]) -> Result<Mape> {
    check_pair(pred, target)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (p, t) in pred.iter().zip(target) {
        if *t == 0.0 {
            continue;
        }
        sum += ((p - t) / t).abs();
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric("MAPE undefined: every target is zero".into()));
    }
    Ok(Mape {
        value: 100.0 * sum / used as f64,
        excluded: pred.len() - used,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Mean and population standard deviation of per-window errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub rmse: f64,
    pub rmse_std: f64,
    pub mape: f64,
    pub mape_std: f64,
    pub mape_excluded: usize,
    pub windows: usize,
}

/// Scores forecasts `[M, H]` against targets `[M, H]` window by window.
pub fn forecast_metrics(pred: &Tensor, target: &Tensor) -> Result<ForecastMetrics> {
    if pred.shape() != target.shape() || pred.rank() != 2 {
        return Err(Error::Metric(format!(
            "forecast shape {:?} vs target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let m = pred.shape()[0];
    let mut rmses = Vec::with_capacity(m);
    let mut mapes = Vec::with_capacity(m);
    let mut excluded = 0;
    for i in 0..m {
        rmses.push(rmse(pred.row(i), target.row(i))?);
        match mape(pred.row(i), target.row(i)) {
            Ok(r) => {
                mapes.push(r.value);
                excluded += r.excluded;
            }
            Err(_) => excluded += target.shape()[1],
        }
    }
    if mapes.is_empty() {
        return Err(Error::Metric("MAPE undefined: every target is zero".into()));
    }
    let (rmse, rmse_std) = mean_std(&rmses);
    let (mape, mape_std) = mean_std(&mapes);
    Ok(ForecastMetrics {
        rmse,
        rmse_std,
        mape,
        mape_std,
        mape_excluded: excluded,
        windows: m,
    })
}

/// Repeats the last observed value `h_out` times.
pub fn naive_forecast(window: &[f64], h_out: usize) -> Result<Vec<f64>> {
    let last = *window
        .last()
        .ok_or_else(|| Error::contract("naive forecast needs a non-empty window"))?;
    Ok(vec![last; h_out])
}

/// Naive forecasts for every window row of `inputs`.
pub fn naive_forecasts(inputs: &Tensor, h_out: usize) -> Result<Tensor> {
    let m = inputs.shape()[0];
    let mut data = Vec::with_capacity(m * h_out);
    for i in 0..m {
        data.extend(naive_forecast(inputs.row(i), h_out)?);
    }
    Tensor::new(vec![m, h_out], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Unimodal,
    Bimodal,
}

/// Counting rule for two-curve bimodality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BimodalityTest {
    /// Half-width of the band around each reference value.
    pub band: f64,
    /// Share of samples each band must hold.
    pub min_fraction: f64,
}

impl Default for BimodalityTest {
    fn default() -> Self {
        Self {
            band: 0.2,
            min_fraction: 0.1,
        }
    }
}

impl BimodalityTest {
    /// Bimodal when both bands hold at least `min_fraction` of the samples
    /// and a bin at the midpoint holds fewer samples than either band. The
    /// midpoint bin has half-width `band`, shrunk to a quarter of the gap
    /// when the bands would overlap it.
    pub fn classify(&self, samples: &[f64], curves: (f64, f64)) -> Modality {
        let (a, b) = curves;
        let n = samples.len() as f64;
        let count = |c: f64, w: f64| samples.iter().filter(|&&s| (s - c).abs() <= w).count();
        let (na, nb) = (count(a, self.band), count(b, self.band));
        let gap = (a - b).abs();
        let mid_w = if gap / 2.0 < 2.0 * self.band {
            self.band.min(gap / 4.0)
        } else {
            self.band
        };
        let nm = count(0.5 * (a + b), mid_w);
        let enough = |k: usize| k as f64 >= self.min_fraction * n - 1e-9;
        if enough(na) && enough(nb) && nm < na.min(nb) {
            Modality::Bimodal
        } else {
            Modality::Unimodal
        }
    }
}

pub fn detect_bimodality(samples: &[f64], curves: (f64, f64)) -> Modality {
    BimodalityTest::default().classify(samples, curves)
}
