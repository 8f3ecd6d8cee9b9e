//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.
//!
//! Set `POSTPRED_TABLE3_CSV` to a monthly temperature CSV to additionally
//! check the published forecasting errors.

use std::cell::RefCell;
use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use postpred_cli::config::Experiment;
use postpred_cli::run::{regression_training_data, run_to_dir};
use postpred_cli::{load_config, Metrics};
use postpred::datasets::{standardize, RegressionDataset};
use postpred::gradcheck::{check_gradient, GradCheck, GradCheckReport};
use postpred::posterior::{
    bind_params, compose_per_layer, sample_theta, ConditionalPosterior, HypernetArch, InitSpec, LatentBase,
    MdnArch, MdnPosterior, PosteriorModel, UnconditionedPosterior,
};
use postpred::{
    mc_predictive_loss, sample_predictive, train, Activation, EarlyStopping, Grouping, Likelihood, LinearModel,
    LossMode, MlpModel, NBeatsConfig, NBeatsModel, Optimizer, PrimaryModel, Tape, Tensor, ThetaBatch, TrainConfig,
    Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Verdict = Result<(bool, String), String>;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Runs bundled configs, remembering the metrics JSON of each (config, seed).
struct Runner {
    scratch: tempfile::TempDir,
    memo: RefCell<HashMap<(String, u64), (String, Metrics)>>,
    runs: RefCell<usize>,
}

impl Runner {
    fn new() -> Self {
        Self {
            scratch: tempfile::tempdir().expect("scratch dir"),
            memo: RefCell::new(HashMap::new()),
            runs: RefCell::new(0),
        }
    }

    fn load(&self, name: &str, seed: Option<u64>) -> Result<(Experiment, String), String> {
        let path = configs_dir().join(name);
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        *self.runs.borrow_mut() += 1;
        let out = self.scratch.path().join(format!("run{}", self.runs.borrow()));
        let exp = load_config(&path, seed, Some(&out)).map_err(|e| format!("{name}: {e}"))?;
        Ok((exp, text))
    }

    /// A fresh run; returns the bytes of metrics.json.
    fn fresh(&self, name: &str, seed: Option<u64>) -> Result<(String, Metrics), String> {
        let (exp, text) = self.load(name, seed)?;
        let outcome = run_to_dir(&exp, &text, &mut |_| {}).map_err(|e| format!("{name}: {e}"))?;
        let json = std::fs::read_to_string(exp.out_dir.join("metrics.json")).map_err(|e| e.to_string())?;
        Ok((json, outcome.metrics))
    }

    fn metrics(&self, name: &str, seed: Option<u64>) -> Result<(String, Metrics), String> {
        let (exp, _) = self.load(name, seed)?;
        let key = (name.to_string(), exp.seed);
        if let Some(hit) = self.memo.borrow().get(&key) {
            return Ok(hit.clone());
        }
        let result = self.fresh(name, Some(exp.seed))?;
        self.memo.borrow_mut().insert(key, result.clone());
        Ok(result)
    }

    fn base_seed(&self, name: &str) -> Result<u64, String> {
        Ok(self.load(name, None)?.0.seed)
    }
}

fn assert_gradients(report: &mut GradCheckReport, inputs: &[Tensor], f: impl Fn(&Tape, &[Var]) -> postpred::Result<Var>) {
    let r = check_gradient(inputs, f, GradCheck::default()).expect("gradient evaluation");
    report.merge(&r);
}

fn op_case(kind: usize, rng: &mut ChaCha8Rng, report: &mut GradCheckReport) {
    let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
    match kind {
        0 => {
            let a = random(&[m, k], -1.0, 1.0, rng);
            let b = random(&[k, n], -1.0, 1.0, rng);
            let c = random(&[1, n], -1.0, 1.0, rng);
            let w = random(&[m, n], -1.0, 1.0, rng);
            assert_gradients(report, &[a, b, c, w], |t, v| {
                let y = t.add(t.matmul(v[0], v[1])?, v[2])?;
                t.sum(t.mul(y, v[3])?, None)
            });
        }
        1 => {
            let g = rng.random_range(1..4);
            let a = random(&[g, m, k], -1.0, 1.0, rng);
            let b = random(&[g, k, n], -1.0, 1.0, rng);
            let w = random(&[n, g, m], -1.0, 1.0, rng);
            assert_gradients(report, &[a, b, w], |t, v| {
                let y = t.permute(t.batched_matmul(v[0], v[1])?, &[2, 0, 1])?;
                t.sum(t.mul(y, v[2])?, None)
            });
        }
        2 => {
            let mut a = random(&[m, n], 0.1, 1.5, rng);
            a.data_mut().iter_mut().for_each(|v| {
                if rng.random_bool(0.5) {
                    *v = -*v
                }
            });
            let b = random(&[m, 1], 0.2, 2.0, rng);
            let w = random(&[m, n], -1.0, 1.0, rng);
            assert_gradients(report, &[a, b, w], |t, v| {
                let s = t.add(t.relu(v[0]), t.abs(v[0]))?;
                let s = t.add(s, t.exp(t.scale(v[0], 0.5)))?;
                let s = t.sub(s, t.square(t.shift(v[0], 0.3)))?;
                let s = t.add(s, t.log(v[1])?)?;
                t.sum(t.mul(t.neg(s), v[2])?, None)
            });
        }
        3 => {
            let a = random(&[m, n], -3.0, 3.0, rng);
            let w = random(&[m, n], -1.0, 1.0, rng);
            let axis = rng.random_range(0..2);
            assert_gradients(report, &[a, w], |t, v| {
                let l = t.sum(t.logsumexp(v[0], axis)?, None)?;
                let mn = t.sum(t.mean(t.mul(v[0], v[1])?, Some(axis))?, None)?;
                t.add(l, mn)
            });
        }
        _ => {
            let c = n + 1;
            let a = random(&[m, c], -1.0, 1.0, rng);
            let w = random(&[m, 2 * c], -1.0, 1.0, rng);
            let start = rng.random_range(1..c);
            assert_gradients(report, &[a, w], |t, v| {
                let head = t.narrow(v[0], 1, start, c - start)?;
                let tail = t.narrow(v[0], 1, 0, start)?;
                let y = t.concat(&[head, tail, v[0]], 1)?;
                let y = t.reshape(y, [m * 2 * c])?;
                let w = t.reshape(v[1], [m * 2 * c])?;
                t.sum(t.mul(t.square(y), w)?, None)
            });
        }
    }
}

fn pipeline_case(kind: usize, rng: &mut ChaCha8Rng, report: &mut GradCheckReport) {
    let seed: u64 = rng.random();
    // Nonzero centers keep ReLU pre-activations away from the kink at 0.
    let centered = |len: usize, rng: &mut ChaCha8Rng| InitSpec {
        theta_center: Some((0..len).map(|_| rng.random_range(-1.0..1.0)).collect()),
        output_scale: Some(1.0),
    };
    let likelihood = match rng.random_range(0..3) {
        0 => Likelihood::Gaussian { sigma: 0.7 },
        1 => Likelihood::L1,
        _ => Likelihood::SseL2 { lambda: 0.05 },
    };
    let mode = if rng.random_bool(0.5) { LossMode::NegLogMeanProb } else { LossMode::MeanProb };
    let (primary, posterior): (Box<dyn PrimaryModel>, Box<dyn PosteriorModel>) = match kind {
        0 => {
            let p = MlpModel::new(&[1, rng.random_range(1..5), 1], Activation::Relu).unwrap();
            let arch = HypernetArch::parse("[3,5,P]", p.layout().total_len()).unwrap();
            let init = centered(p.layout().total_len(), rng);
            let g = UnconditionedPosterior::new(&arch, LatentBase::default(), &init, rng).unwrap();
            (Box::new(p), Box::new(g))
        }
        1 => {
            let d = rng.random_range(1..3);
            let p = LinearModel::new(d, rng.random_range(1..3));
            let arch = HypernetArch::parse("[2,4,P]", p.layout().total_len()).unwrap();
            let init = centered(p.layout().total_len(), rng);
            let g = ConditionalPosterior::new(&arch, LatentBase::StandardNormal, d, &init, rng).unwrap();
            (Box::new(p), Box::new(g))
        }
        2 => {
            let p = MlpModel::new(&[2, 3, 1], Activation::Relu).unwrap();
            let arch = MdnArch::parse("[6]", p.layout().total_len()).unwrap();
            let init = centered(p.layout().total_len(), rng);
            let g = MdnPosterior::new(&arch, 2, &init, rng).unwrap();
            (Box::new(p), Box::new(g))
        }
        _ => {
            let cfg = NBeatsConfig {
                input_len: 3,
                horizon: 2,
                blocks: 2,
                width: 3,
                depth: 1,
                theta_dim: 2,
                shared: true,
            };
            let p = NBeatsModel::new(cfg).unwrap();
            let parts: Vec<(std::ops::Range<usize>, Box<dyn PosteriorModel>)> = p
                .layout()
                .layer_ranges()
                .into_iter()
                .map(|r| {
                    let arch = HypernetArch::parse("[2,3,P]", r.len()).unwrap();
                    let init = centered(r.len(), rng);
                    let g = UnconditionedPosterior::new(&arch, LatentBase::default(), &init, rng).unwrap();
                    (r, Box::new(g) as Box<dyn PosteriorModel>)
                })
                .collect();
            let total = p.layout().total_len();
            (Box::new(p), Box::new(compose_per_layer(parts, total).unwrap()))
        }
    };
    let batch = rng.random_range(1..4);
    let samples = rng.random_range(1..4);
    let x = random(&[batch, primary.input_dim()], -1.0, 1.0, rng);
    let y = random(&[batch, primary.output_dim()], -1.0, 1.0, rng);
    let inputs: Vec<Tensor> = posterior.params().iter().map(|p| p.value.clone()).collect();
    assert_gradients(report, &inputs, |t, v| {
        let mut noise = ChaCha8Rng::seed_from_u64(seed);
        let cond = (posterior.cond_dim() > 0).then(|| x.clone());
        let theta = posterior.sample(t, v, cond.as_ref(), samples, &mut noise)?;
        let pred = primary.forward(t, &theta, &x)?;
        let ll = likelihood.mc_log_liks(t, pred, &y, &theta)?;
        mc_predictive_loss(t, ll, mode)
    });
}

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut report = GradCheckReport::default();
    let mut configs = 0;
    for i in 0..60 {
        op_case(i % 5, &mut rng, &mut report);
        configs += 1;
    }
    for i in 0..60 {
        pipeline_case(i % 4, &mut rng, &mut report);
        configs += 1;
    }
    Ok((
        report.passed() && configs >= 100,
        format!(
            "{configs} configurations, {} partials, {} failures, max rel error {:.2e}, max abs error {:.2e}",
            report.checked, report.failures, report.max_rel_error, report.max_abs_error
        ),
    ))
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    while cases < 100 {
        let (b, l) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (d, h, o) = (rng.random_range(1..=3), rng.random_range(1..=16), rng.random_range(1..=3));
        let primary = MlpModel::new(&[d, h, o], Activation::Relu).unwrap();
        let p = primary.layout().total_len();
        if p > 200 {
            continue;
        }
        cases += 1;
        let arch = HypernetArch::parse("[3,8,P]", p).unwrap();
        let init = InitSpec {
            theta_center: None,
            output_scale: Some(1.0),
        };
        let post = ConditionalPosterior::new(&arch, LatentBase::default(), d, &init, &mut rng).unwrap();
        let x = random(&[b, d], -2.0, 2.0, &mut rng);
        let tape = Tape::new();
        let vars = bind_params(&tape, &post);
        let gen_in = post.generator_input(&x, l, &mut rng).unwrap();
        let theta = post.net().forward(&tape, &vars, tape.constant(gen_in.clone())).unwrap();
        let batch = ThetaBatch {
            values: theta,
            grouping: Grouping::PerExample { batch: b, samples: l },
        };
        let pred = tape.value(primary.forward(&tape, &batch, &x).unwrap());
        for i in 0..b {
            for s in 0..l {
                let t = Tape::new();
                let v = bind_params(&t, &post);
                let row = Tensor::new(vec![1, gen_in.shape()[1]], gen_in.row(i * l + s).to_vec()).unwrap();
                let single = ThetaBatch {
                    values: post.net().forward(&t, &v, t.constant(row)).unwrap(),
                    grouping: Grouping::Shared { samples: 1 },
                };
                let out = t.value(primary.forward(&t, &single, &x.select_rows(&[i]).unwrap()).unwrap());
                for k in 0..o {
                    worst = worst.max((out.data()[k] - pred.get(&[s, i, k])).abs());
                }
            }
        }
    }
    Ok((worst <= 1e-12, format!("{cases} shapes, max abs difference {worst:.1e}")))
}

fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 256;
    let noise = Normal::new(0.0, 0.1).unwrap();
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| 2.0 * x + 1.0 + noise.sample(&mut rng)).collect();
    let (slope, intercept) = ols(&xs, &ys);
    let data = RegressionDataset::new(
        Tensor::new(vec![n, 1], xs).unwrap(),
        Tensor::new(vec![n, 1], ys).unwrap(),
        None,
    )
    .unwrap();

    let primary = LinearModel::new(1, 1);
    let layout = primary.layout();
    let arch = HypernetArch::parse("[4,16,P]", layout.total_len()).unwrap();
    let init = InitSpec {
        theta_center: Some(layout.init_theta(&mut rng)),
        output_scale: None,
    };
    let mut post = UnconditionedPosterior::new(&arch, LatentBase::default(), &init, &mut rng).unwrap();
    post.make_degenerate();
    let cfg = TrainConfig {
        epochs: 1500,
        batch_size: n,
        mc_samples: 10,
        optimizer: Optimizer::adam(0.01),
        early_stopping: EarlyStopping::disabled(),
        loss_mode: LossMode::NegLogMeanProb,
        clip_norm: None,
        use_labels: false,
        seed: 3,
    };
    train(&primary, &mut post, &Likelihood::Gaussian { sigma: 0.1 }, &data, &cfg).map_err(|e| e.to_string())?;
    let (theta, _) = sample_theta(&post, None, 1, &mut rng).map_err(|e| e.to_string())?;
    let (w, b) = (theta.data()[0], theta.data()[1]);
    let grid = Tensor::new(vec![200, 1], postpred::datasets::linspace(-2.0, 2.0, 200)).unwrap();
    let fan = sample_predictive(&primary, &post, &grid, None, 30, &mut rng).map_err(|e| e.to_string())?;
    let band = (0..200)
        .map(|i| {
            let pts = fan.point(i, 0);
            pts.iter().cloned().fold(f64::MIN, f64::max) - pts.iter().cloned().fold(f64::MAX, f64::min)
        })
        .fold(0.0, f64::max);
    let (dw, db) = ((w - slope).abs(), (b - intercept).abs());
    Ok((
        dw < 1e-2 && db < 1e-2 && band < 1e-9,
        format!("slope off by {dw:.1e}, intercept off by {db:.1e}, fan band {band:.1e}"),
    ))
}

fn standardized_ols_rmse(exp: &Experiment) -> Result<f64, String> {
    let raw = regression_training_data(exp)
        .map_err(|e| e.to_string())?
        .ok_or("not a regression experiment")?;
    let std = standardize(&raw).map_err(|e| e.to_string())?.data;
    let (x, y) = (std.x.data(), std.y.data());
    let (w, b) = ols(x, y);
    let mse = x.iter().zip(y).map(|(xi, yi)| (yi - w * xi - b).powi(2)).sum::<f64>() / x.len() as f64;
    Ok(mse.sqrt())
}

fn criterion_4(runner: &Runner) -> Verdict {
    let (_, cond) = runner.metrics("xsinx_linear_conditional.toml", None)?;
    let (_, uncond) = runner.metrics("xsinx_linear_unconditioned.toml", None)?;
    let (exp, _) = runner.load("xsinx_linear_unconditioned.toml", None)?;
    let line = standardized_ols_rmse(&exp)?;
    let c = cond.train_rmse.ok_or("missing train_rmse")?;
    let u = uncond.train_rmse.ok_or("missing train_rmse")?;
    Ok((
        c < 0.25 && u >= line - 0.02,
        format!("conditional train RMSE {c:.3}; unconditioned {u:.3} vs least-squares line {line:.3}"),
    ))
}

fn criterion_5(runner: &Runner) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["multimodal_l1.toml", "multimodal_labeled.toml"] {
        let base = runner.base_seed(name)?;
        for seed in base..base + 3 {
            let (_, m) = runner.metrics(name, Some(seed))?;
            let bi = m.bimodal_fraction_overlap.ok_or("missing bimodal fraction")?;
            let uni = m.unimodal_fraction_outside.ok_or("missing unimodal fraction")?;
            ok &= bi >= 0.8 && uni >= 0.8;
            parts.push(format!("{} seed {seed}: {bi:.2}/{uni:.2}", m.experiment));
        }
    }
    Ok((ok, format!("bimodal/unimodal shares: {}", parts.join(", "))))
}

fn criterion_6(runner: &Runner) -> Verdict {
    let base = runner.base_seed("forecast_conditional.toml")?;
    let mut ordered = 0;
    let mut parts = Vec::new();
    for seed in base..base + 3 {
        let (_, c) = runner.metrics("forecast_conditional.toml", Some(seed))?;
        let (_, u) = runner.metrics("forecast_unconditioned.toml", Some(seed))?;
        let (c, u) = (c.rmse.ok_or("missing rmse")?, (u.rmse.ok_or("missing rmse")?, u.naive));
        let naive = u.1.ok_or("missing naive metrics")?.rmse;
        if c < u.0 && u.0 < naive {
            ordered += 1;
        }
        parts.push(format!("seed {seed}: {c:.3} < {:.3} < {naive:.3}", u.0));
    }
    let mut ok = ordered >= 2;
    let mut detail = format!("{ordered}/3 seeds ordered ({})", parts.join(", "));
    if let Ok(csv) = std::env::var("POSTPRED_TABLE3_CSV") {
        let (pass, d) = table3(&csv)?;
        ok &= pass;
        detail.push_str(&format!("; published errors: {d}"));
    }
    Ok((ok, detail))
}

/// Published RMSE of the naive, maximum-likelihood, unconditioned and
/// conditional forecasters on the monthly England temperature series.
fn table3(csv: &str) -> Result<(bool, String), String> {
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let expected = [4.47, 2.87, 1.86, 1.35];
    let variants = [
        ("unconditioned", "degenerate = true\n"),
        ("unconditioned", ""),
        ("conditional", ""),
    ];
    let mut got = Vec::new();
    for (i, (posterior, extra)) in variants.iter().enumerate() {
        let text = format!(
            "experiment = \"forecast\"\nseed = 0\nposterior = \"{posterior}\"\nseries_csv = \"{}\"\n{extra}",
            csv.replace('\\', "\\\\").replace('"', "\\\"")
        );
        let out = scratch.path().join(format!("t{i}"));
        let exp = postpred_cli::parse_config(&text, Path::new("."), None, Some(&out)).map_err(|e| e.to_string())?;
        let m = run_to_dir(&exp, &text, &mut |_| {}).map_err(|e| e.to_string())?.metrics;
        if i == 0 {
            got.push(m.naive.ok_or("missing naive metrics")?.rmse);
        }
        got.push(m.rmse.ok_or("missing rmse")?);
    }
    let within = got.iter().zip(expected).all(|(g, e)| (g - e).abs() <= 0.25 * e);
    let ranked = got.windows(2).all(|w| w[1] < w[0]);
    Ok((within && ranked, format!("{got:.2?} vs {expected:?}")))
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let primary = MlpModel::new(&[1, 32, 1], Activation::Relu).unwrap();
    let arch = HypernetArch::parse("[4,16,P]", primary.layout().total_len()).unwrap();
    let init = InitSpec {
        theta_center: Some(primary.layout().init_theta(&mut rng)),
        output_scale: Some(1.0),
    };
    let post = UnconditionedPosterior::new(&arch, LatentBase::default(), &init, &mut rng).unwrap();
    let x = random(&[32, 1], -2.0, 2.0, &mut rng);
    let y = Tensor::new(vec![32, 1], x.data().iter().map(|v| v * v.sin()).collect()).unwrap();
    let lik = Likelihood::Gaussian { sigma: 1.0 };
    let estimate = |samples: usize, rng: &mut ChaCha8Rng| -> f64 {
        let tape = Tape::new();
        let vars = bind_params(&tape, &post);
        let theta = post.sample(&tape, &vars, None, samples, rng).unwrap();
        let pred = primary.forward(&tape, &theta, &x).unwrap();
        let ll = lik.mc_log_liks(&tape, pred, &y, &theta).unwrap();
        tape.item(mc_predictive_loss(&tape, ll, LossMode::MeanProb).unwrap()).unwrap()
    };
    let spread = |samples: usize, rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..200).map(|_| estimate(samples, rng)).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    let (s1, s10) = (spread(1, &mut rng), spread(10, &mut rng));
    let ratio = s1 / s10;
    let target = 10f64.sqrt();
    Ok((
        (ratio - target).abs() <= 0.2 * target,
        format!("std L=1 {s1:.3e}, L=10 {s10:.3e}, ratio {ratio:.3} (target {target:.3})"),
    ))
}

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ll = random(&[10, 16], -1e6, -1e4, &mut rng);
    let tape = Tape::new();
    let v = tape.param(ll.clone());
    let loss = mc_predictive_loss(&tape, v, LossMode::NegLogMeanProb).map_err(|e| e.to_string())?;
    tape.backward(loss).map_err(|e| e.to_string())?;
    let value = tape.item(loss).map_err(|e| e.to_string())?;
    let grad_ok = tape.grad(v).is_some_and(|g| g.all_finite());
    // log L − max_l ll bounds the per-column term from below.
    let bound: f64 = (0..16)
        .map(|b| {
            let best = (0..10).map(|l| ll.get(&[l, b])).fold(f64::MIN, f64::max);
            10f64.ln() - best
        })
        .sum::<f64>()
        / 16.0;
    Ok((
        value.is_finite() && grad_ok && value <= bound + 1e-6 && value >= bound - 10f64.ln(),
        format!("loss {value:.6e}, gradient finite: {grad_ok}"),
    ))
}

fn criterion_9(runner: &Runner) -> Verdict {
    let mut names: Vec<String> = std::fs::read_dir(configs_dir())
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".toml"))
        .collect();
    names.sort();
    let mut mismatched = Vec::new();
    for name in &names {
        let (first, _) = runner.metrics(name, None)?;
        let (second, _) = runner.fresh(name, None)?;
        if first != second {
            mismatched.push(name.clone());
        }
    }
    Ok((
        mismatched.is_empty() && !names.is_empty(),
        format!("{} configs, mismatched: {mismatched:?}", names.len()),
    ))
}

fn main() -> ExitCode {
    let runner = Runner::new();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("gradient suite", Box::new(criterion_1)),
        ("batched equivalence", Box::new(criterion_2)),
        ("degenerate posterior collapse", Box::new(criterion_3)),
        ("linear primary capacity", Box::new(|| criterion_4(&runner))),
        ("multimodality", Box::new(|| criterion_5(&runner))),
        ("forecast ordering", Box::new(|| criterion_6(&runner))),
        ("Monte-Carlo estimator spread", Box::new(criterion_7)),
        ("log-sum-exp stability", Box::new(criterion_8)),
        ("determinism", Box::new(|| criterion_9(&runner))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = match catch_unwind(AssertUnwindSafe(|| check())) {
            Ok(v) => v,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into())),
        };
        let (pass, detail) = match verdict {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "{} criterion {} ({name}): {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
