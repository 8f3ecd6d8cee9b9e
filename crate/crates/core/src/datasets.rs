//! Synthetic regression sets, series windowing, CSV ingestion and
//! standardization.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Input/output pairs, optionally with a per-example label column.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDataset {
    pub x: Tensor,
    pub y: Tensor,
    pub labels: Option<Tensor>,
}

impl RegressionDataset {
    pub fn new(x: Tensor, y: Tensor, labels: Option<Tensor>) -> Result<Self> {
        let n = x.shape().first().copied().unwrap_or(0);
        let ok = x.rank() == 2
            && y.rank() == 2
            && y.shape()[0] == n
            && labels.as_ref().is_none_or(|l| l.rank() == 2 && l.shape() == [n, 1]);
        if !ok {
            return Err(Error::Dimension {
                op: "RegressionDataset",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        Ok(Self { x, y, labels })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.y.shape()[1]
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            x: self.x.select_rows(idx)?,
            y: self.y.select_rows(idx)?,
            labels: self.labels.as_ref().map(|l| l.select_rows(idx)).transpose()?,
        })
    }

    /// Conditioning features for a posterior: x, followed by the label
    /// column when `with_labels` is set.
    pub fn features(&self, with_labels: bool) -> Result<Tensor> {
        match (&self.labels, with_labels) {
            (_, false) => Ok(self.x.clone()),
            (Some(l), true) => Tensor::hcat(&[&self.x, l]),
            (None, true) => Err(Error::contract("dataset has no labels")),
        }
    }

    /// Writes columns `x0.., y0.., label` with a header row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.input_dim()).map(|i| format!("x{i}")).collect();
        header.extend((0..self.output_dim()).map(|i| format!("y{i}")));
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(f64::to_string).collect();
            rec.extend(self.y.row(i).iter().map(f64::to_string));
            if let Some(l) = &self.labels {
                rec.push(l.row(i)[0].to_string());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn column(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::new(vec![n, 1], values).expect("column shape")
}

/// The four high-variance points added to the x·sin(x) samples.
pub const XSINX_OUTLIERS: [(f64, f64); 4] = [(7.0, -7.0), (8.5, 7.0), (10.0, -7.0), (11.5, 7.0)];
pub const XSINX_TRAIN_RANGE: (f64, f64) = (0.0, 12.0);
pub const XSINX_TEST_RANGE: (f64, f64) = (-2.0, 14.0);
pub const XSINX_TEST_POINTS: usize = 1024;

/// How base inputs are placed on the training interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    #[default]
    Random,
    Grid,
}

/// A training set plus a dense test grid.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub train: RegressionDataset,
    pub test_x: Tensor,
    pub test_labels: Option<Tensor>,
}

/// Evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + step * i as f64).collect()
}

/// `n_base` noise-free samples of y = x·sin(x) on [0, 12) followed by the
/// four outliers, with a 1024-point test grid on [−2, 14].
pub fn gen_xsinx(n_base: usize, spacing: Spacing, rng: &mut dyn RngCore) -> SyntheticSet {
    let (lo, hi) = XSINX_TRAIN_RANGE;
    let mut xs: Vec<f64> = match spacing {
        Spacing::Random => (0..n_base).map(|_| rng.random_range(lo..hi)).collect(),
        Spacing::Grid => (0..n_base).map(|i| lo + (hi - lo) * i as f64 / n_base as f64).collect(),
    };
    let mut ys: Vec<f64> = xs.iter().map(|&x| x * x.sin()).collect();
    for (x, y) in XSINX_OUTLIERS {
        xs.push(x);
        ys.push(y);
    }
    let (tlo, thi) = XSINX_TEST_RANGE;
    SyntheticSet {
        train: RegressionDataset::new(column(xs), column(ys), None).expect("consistent"),
        test_x: column(linspace(tlo, thi, XSINX_TEST_POINTS)),
        test_labels: None,
    }
}

pub const MULTIMODAL_OVERLAP: (f64, f64) = (0.3, 0.6);

/// Noise-free value of the lower (`upper = false`) or upper branch.
pub fn multimodal_curve(x: f64, upper: bool) -> f64 {
    let a = 10.0 * x - 5.0;
    a * a.sin() + if upper { 1.0 } else { 0.0 }
}

/// Two parallel noisy curves: the lower one on (0, 0.6), the upper one on
/// (0.3, 1), with equal sample counts. Even indices are drawn from the
/// lower branch and odd ones from the upper branch, so inside the overlap
/// the label equals the index parity (and the branch). Outside the overlap
/// labels are fair coins, as are the labels of the `n_test` test inputs.
pub fn gen_multimodal(n: usize, noise_std: f64, n_test: usize, rng: &mut dyn RngCore) -> SyntheticSet {
    let noise = Normal::new(0.0, noise_std).expect("finite noise std");
    let (olo, ohi) = MULTIMODAL_OVERLAP;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let upper = i % 2 == 1;
        let x = if upper {
            rng.random_range(olo..1.0)
        } else {
            rng.random_range(0.0..ohi)
        };
        let in_overlap = x > olo && x < ohi;
        let label = if in_overlap {
            (i % 2) as f64
        } else {
            f64::from(u8::from(rng.random_bool(0.5)))
        };
        xs.push(x);
        ys.push(multimodal_curve(x, upper) + noise.sample(rng));
        labels.push(label);
    }
    let test: Vec<f64> = (0..n_test).map(|i| (i as f64 + 0.5) / n_test as f64).collect();
    let test_labels: Vec<f64> = (0..n_test).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    SyntheticSet {
        train: RegressionDataset::new(column(xs), column(ys), Some(column(labels))).expect("consistent"),
        test_x: column(test),
        test_labels: Some(column(test_labels)),
    }
}

/// Period-`period` sine with a linear trend and Gaussian noise.
pub fn synthetic_seasonal(
    len: usize,
    period: f64,
    amplitude: f64,
    trend: f64,
    noise_std: f64,
    rng: &mut dyn RngCore,
) -> Vec<f64> {
    let noise = Normal::new(0.0, noise_std).expect("finite noise std");
    (0..len)
        .map(|t| {
            let t = t as f64;
            amplitude * (2.0 * std::f64::consts::PI * t / period).sin() + trend * t + noise.sample(rng)
        })
        .collect()
}

/// Chronological share of windows used for training (2075 of 2960).
pub const DEFAULT_TRAIN_FRACTION: f64 = 2075.0 / 2960.0;

/// Sliding input/target windows over a series.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSeries {
    pub inputs: Tensor,
    pub targets: Tensor,
    /// Windows before this index are training windows.
    pub split: usize,
}

/// All `T − h_in − h_out + 1` windows; window m reads `series[m..m+h_in]`
/// and targets `series[m+h_in..m+h_in+h_out]`. `split` is set to M.
pub fn window_series(series: &[f64], h_in: usize, h_out: usize) -> Result<WindowedSeries> {
    if h_in == 0 || h_out == 0 {
        return Err(Error::contract("window lengths must be positive"));
    }
    if series.len() < h_in + h_out {
        return Err(Error::contract(format!(
            "series of length {} is shorter than one window ({h_in} + {h_out})",
            series.len()
        )));
    }
    let m = series.len() - h_in - h_out + 1;
    let mut inputs = Vec::with_capacity(m * h_in);
    let mut targets = Vec::with_capacity(m * h_out);
    for s in 0..m {
        inputs.extend_from_slice(&series[s..s + h_in]);
        targets.extend_from_slice(&series[s + h_in..s + h_in + h_out]);
    }
    Ok(WindowedSeries {
        inputs: Tensor::new(vec![m, h_in], inputs)?,
        targets: Tensor::new(vec![m, h_out], targets)?,
        split: m,
    })
}

impl WindowedSeries {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sets a chronological split; both sides keep at least one window.
    pub fn with_split(mut self, train_fraction: f64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::contract(format!("train fraction {train_fraction} outside (0, 1)")));
        }
        let m = self.len();
        if m < 2 {
            return Err(Error::contract("need at least two windows to split"));
        }
        self.split = ((m as f64 * train_fraction).round() as usize).clamp(1, m - 1);
        Ok(self)
    }

    fn part(&self, rows: std::ops::Range<usize>) -> Result<RegressionDataset> {
        let idx: Vec<usize> = rows.collect();
        RegressionDataset::new(self.inputs.select_rows(&idx)?, self.targets.select_rows(&idx)?, None)
    }

    pub fn train(&self) -> Result<RegressionDataset> {
        self.part(0..self.split)
    }

    pub fn test(&self) -> Result<RegressionDataset> {
        if self.split >= self.len() {
            return Err(Error::contract("series has no test windows"));
        }
        self.part(self.split..self.len())
    }
}

/// Reads a single-column numeric CSV. A non-numeric first row is taken as
/// a header; with several columns the last one is used.
pub fn parse_csv_series<R: Read>(input: R) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut values = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Ingestion {
            line: e.position().map_or(i + 1, |p| p.line() as usize),
            detail: e.to_string(),
        })?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        let field = rec.iter().last().unwrap_or("");
        match field.parse::<f64>() {
            Ok(v) if v.is_finite() => values.push(v),
            _ if i == 0 => {}
            _ => {
                return Err(Error::Ingestion {
                    line,
                    detail: format!("{field:?} is not a finite number"),
                })
            }
        }
    }
    if values.is_empty() {
        return Err(Error::Ingestion {
            line: 1,
            detail: "no numeric rows".into(),
        });
    }
    Ok(values)
}

pub fn load_csv_series(path: &Path) -> Result<Vec<f64>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_csv_series(file)
}

/// Per-column affine standardization fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1 for constant columns.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &Tensor) -> Result<Self> {
        if data.rank() != 2 {
            return Err(Error::contract("standardizer expects a matrix"));
        }
        let (n, d) = (data.shape()[0], data.shape()[1]);
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(data.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(data.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    /// A single location/scale shared by every column.
    pub fn fit_scalar(values: &[f64]) -> Result<Self> {
        let t = Tensor::new(vec![values.len(), 1], values.to_vec())?;
        Self::fit(&t)
    }

    fn params(&self, col: usize) -> (f64, f64) {
        if self.mean.len() == 1 {
            (self.mean[0], self.std[0])
        } else {
            (self.mean[col], self.std[col])
        }
    }

    fn map(&self, data: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let d = data.shape().last().copied().unwrap_or(1);
        if self.mean.len() != 1 && self.mean.len() != d {
            return Err(Error::Dimension {
                op: "standardize",
                lhs: data.shape().to_vec(),
                rhs: vec![self.mean.len()],
            });
        }
        let mut out = data.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let (m, s) = self.params(i % d);
            *v = f(*v, m, s);
        }
        Ok(out)
    }

    pub fn apply(&self, data: &Tensor) -> Result<Tensor> {
        self.map(data, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, data: &Tensor) -> Result<Tensor> {
        self.map(data, |v, m, s| v * s + m)
    }
}

/// A dataset with standardized x and y plus the fitted transforms.
#[derive(Debug, Clone)]
pub struct Standardized {
    pub data: RegressionDataset,
    pub x_scaler: Standardizer,
    pub y_scaler: Standardizer,
}

/// Fits x and y standardizers on `train` and applies them.
pub fn standardize(train: &RegressionDataset) -> Result<Standardized> {
    let x_scaler = Standardizer::fit(&train.x)?;
    let y_scaler = Standardizer::fit(&train.y)?;
    Ok(Standardized {
        data: RegressionDataset::new(x_scaler.apply(&train.x)?, y_scaler.apply(&train.y)?, train.labels.clone())?,
        x_scaler,
        y_scaler,
    })
}

/// Random permutation of `0..n` split into a held-out tail of
/// `round(n·fraction)` indices (at least one when `fraction > 0`).
pub fn random_holdout(n: usize, fraction: f64, rng: &mut dyn RngCore) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let k = holdout_len(n, fraction);
    let held = idx.split_off(n - k);
    (idx, held)
}

/// Chronological split: the last `round(n·fraction)` indices are held out.
pub fn tail_holdout(n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let k = holdout_len(n, fraction);
    ((0..n - k).collect(), (n - k..n).collect())
}

fn holdout_len(n: usize, fraction: f64) -> usize {
    if fraction <= 0.0 || n < 2 {
        return 0;
    }
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}
