//! Flat TOML experiment configuration and its validation.
//!
//! Every key is optional except `experiment`; unset keys take the
//! experiment's defaults. Validation collects every problem it finds and
//! reports each with the key and, when the key is present in the file,
//! its line number.

use std::fmt;
use std::path::{Path, PathBuf};

use postpred::datasets::{self, Spacing};
use postpred::posterior::{HypernetArch, LatentBase, MdnArch};
use postpred::trainer::Holdout;
use postpred::{
    Activation, EarlyStopping, Likelihood, LossMode, MlpModel, NBeatsConfig, NBeatsModel, Optimizer, PrimaryModel,
    TrainConfig,
};
use serde::{Deserialize, Serialize};

/// Raw file contents; field names are the config keys.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub experiment: Option<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<String>,

    pub primary: Option<String>,
    pub primary_arch: Option<String>,
    pub activation: Option<String>,
    pub nbeats_blocks: Option<usize>,
    pub nbeats_width: Option<usize>,
    pub nbeats_depth: Option<usize>,
    pub nbeats_theta_dim: Option<usize>,
    pub nbeats_shared: Option<bool>,

    pub posterior: Option<String>,
    pub posterior_arch: Option<String>,
    pub latent: Option<String>,
    pub degenerate: Option<bool>,
    pub init_output_scale: Option<f64>,

    pub likelihood: Option<String>,
    pub sigma: Option<f64>,
    pub lambda: Option<f64>,
    pub loss_mode: Option<String>,

    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub mc_samples: Option<usize>,
    pub optimizer: Option<String>,
    pub lr: Option<f64>,
    pub clip_norm: Option<f64>,
    pub early_stopping: Option<bool>,
    pub val_fraction: Option<f64>,
    pub patience: Option<usize>,
    pub min_delta: Option<f64>,

    pub n_base: Option<usize>,
    pub spacing: Option<String>,
    pub n_samples: Option<usize>,
    pub noise_std: Option<f64>,
    pub n_test: Option<usize>,
    pub series_csv: Option<String>,
    pub series_len: Option<usize>,
    pub season_period: Option<f64>,
    pub season_amplitude: Option<f64>,
    pub trend: Option<f64>,
    pub series_noise: Option<f64>,
    pub h_in: Option<usize>,
    pub h_out: Option<usize>,
    pub train_fraction: Option<f64>,

    pub eval_samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Xsinx,
    XsinxLinearPrimary,
    MultimodalL1,
    MultimodalLabeled,
    Forecast,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "xsinx" => Self::Xsinx,
            "xsinx_linear_primary" => Self::XsinxLinearPrimary,
            "multimodal_l1" => Self::MultimodalL1,
            "multimodal_labeled" => Self::MultimodalLabeled,
            "forecast" => Self::Forecast,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Xsinx => "xsinx",
            Self::XsinxLinearPrimary => "xsinx_linear_primary",
            Self::MultimodalL1 => "multimodal_l1",
            Self::MultimodalLabeled => "multimodal_labeled",
            Self::Forecast => "forecast",
        }
    }

    fn is_multimodal(self) -> bool {
        matches!(self, Self::MultimodalL1 | Self::MultimodalLabeled)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PrimarySpec {
    Mlp { widths: Vec<usize>, activation: Activation },
    Linear,
    NBeats(NBeatsConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorKind {
    Unconditioned,
    Conditional,
    Mdn,
    PerLayer,
    PerLayerConditional,
}

impl PosteriorKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "unconditioned" => Self::Unconditioned,
            "conditional" => Self::Conditional,
            "mdn" => Self::Mdn,
            "per_layer" => Self::PerLayer,
            "per_layer_conditional" => Self::PerLayerConditional,
            _ => return None,
        })
    }

    pub fn conditioned(self) -> bool {
        !matches!(self, Self::Unconditioned | Self::PerLayer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSpec {
    pub kind: PosteriorKind,
    pub arch: String,
    pub latent: LatentBase,
    pub degenerate: bool,
    /// Scale of the generator's output-layer weights at initialization.
    pub init_output_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SeriesSource {
    Csv(PathBuf),
    Synthetic {
        len: usize,
        period: f64,
        amplitude: f64,
        trend: f64,
        noise_std: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Xsinx {
        n_base: usize,
        spacing: Spacing,
    },
    Multimodal {
        n: usize,
        noise_std: f64,
        n_test: usize,
    },
    Series {
        source: SeriesSource,
        h_in: usize,
        h_out: usize,
        train_fraction: f64,
    },
}

/// A validated experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub primary: PrimarySpec,
    pub posterior: PosteriorSpec,
    pub likelihood: Likelihood,
    pub train: TrainConfig,
    pub data: DataSpec,
    pub eval_samples: usize,
}

impl Experiment {
    pub fn build_primary(&self) -> Box<dyn PrimaryModel> {
        build_primary(&self.primary).expect("validated primary")
    }

    /// Width of the posterior's conditioning features.
    pub fn cond_dim(&self) -> usize {
        if !self.posterior.kind.conditioned() {
            return 0;
        }
        let d = self.build_primary().input_dim();
        d + usize::from(self.train.use_labels)
    }
}

fn build_primary(spec: &PrimarySpec) -> postpred::Result<Box<dyn PrimaryModel>> {
    Ok(match spec {
        PrimarySpec::Mlp { widths, activation } => Box::new(MlpModel::new(widths, *activation)?),
        PrimarySpec::Linear => Box::new(postpred::LinearModel::new(1, 1)),
        PrimarySpec::NBeats(cfg) => Box::new(NBeatsModel::new(cfg.clone())?),
    })
}

/// One problem with one key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigErrors(pub Vec<FieldError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

/// Line of the first `key = ...` assignment in `text`.
fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

fn offset_line(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

struct Collector<'a> {
    text: &'a str,
    errors: Vec<FieldError>,
}

impl Collector<'_> {
    fn push(&mut self, field: &str, message: impl Into<String>) {
        self.errors.push(FieldError {
            field: field.to_string(),
            line: key_line(self.text, field),
            message: message.into(),
        });
    }

    fn positive_usize(&mut self, field: &str, v: Option<usize>, default: usize) -> usize {
        let v = v.unwrap_or(default);
        if v == 0 {
            self.push(field, "must be at least 1");
        }
        v.max(1)
    }

    fn positive_f64(&mut self, field: &str, v: Option<f64>, default: f64) -> f64 {
        let v = v.unwrap_or(default);
        if !(v > 0.0 && v.is_finite()) {
            self.push(field, format!("must be positive, got {v}"));
        }
        v
    }

    fn fraction(&mut self, field: &str, v: Option<f64>, default: f64, allow_zero: bool) -> f64 {
        let v = v.unwrap_or(default);
        let ok = if allow_zero { (0.0..1.0).contains(&v) } else { v > 0.0 && v < 1.0 };
        if !ok {
            let range = if allow_zero { "[0, 1)" } else { "(0, 1)" };
            self.push(field, format!("must lie in {range}, got {v}"));
        }
        v
    }

    fn choice<T>(&mut self, field: &str, v: Option<&str>, default: &str, parse: impl Fn(&str) -> Option<T>, options: &str) -> Option<T> {
        let s = v.unwrap_or(default);
        let out = parse(s);
        if out.is_none() {
            self.push(field, format!("unknown value {s:?}; expected one of {options}"));
        }
        out
    }
}

fn parse_widths(s: &str) -> Option<Vec<usize>> {
    let inner = s.trim().strip_prefix('[')?.strip_suffix(']')?;
    inner
        .split(',')
        .map(|t| t.trim().parse::<usize>().ok().filter(|&n| n > 0))
        .collect()
}

/// Parses a config file's text, applying `seed` and `out_dir` overrides.
pub fn parse_config(
    text: &str,
    base_dir: &Path,
    seed_override: Option<u64>,
    out_override: Option<&Path>,
) -> Result<Experiment, ConfigErrors> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| offset_line(text, s.start));
        let field = line
            .and_then(|l| text.lines().nth(l - 1))
            .and_then(|l| l.split_once('='))
            .map(|(k, _)| k.trim().to_string())
            .unwrap_or_else(|| "<file>".into());
        ConfigErrors(vec![FieldError {
            field,
            line,
            message: e.message().to_string(),
        }])
    })?;
    resolve(&raw, text, base_dir, seed_override, out_override)
}

/// Reads and validates a config file.
pub fn load_config(path: &Path, seed: Option<u64>, out_dir: Option<&Path>) -> Result<Experiment, ConfigErrors> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        ConfigErrors(vec![FieldError {
            field: "<file>".into(),
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        }])
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base, seed, out_dir)
}

fn resolve(
    raw: &RawConfig,
    text: &str,
    base_dir: &Path,
    seed_override: Option<u64>,
    out_override: Option<&Path>,
) -> Result<Experiment, ConfigErrors> {
    let mut c = Collector {
        text,
        errors: Vec::new(),
    };
    let Some(kind_name) = raw.experiment.as_deref() else {
        return Err(ConfigErrors(vec![FieldError {
            field: "experiment".into(),
            line: None,
            message: "missing; expected one of xsinx, xsinx_linear_primary, multimodal_l1, multimodal_labeled, forecast".into(),
        }]));
    };
    let Some(kind) = ExperimentKind::parse(kind_name) else {
        c.push(
            "experiment",
            format!("unknown experiment {kind_name:?}; expected one of xsinx, xsinx_linear_primary, multimodal_l1, multimodal_labeled, forecast"),
        );
        return Err(ConfigErrors(c.errors));
    };

    // Data.
    let data = match kind {
        ExperimentKind::Xsinx | ExperimentKind::XsinxLinearPrimary => DataSpec::Xsinx {
            n_base: c.positive_usize("n_base", raw.n_base, 32),
            spacing: c
                .choice(
                    "spacing",
                    raw.spacing.as_deref(),
                    "random",
                    |s| match s {
                        "random" => Some(Spacing::Random),
                        "grid" => Some(Spacing::Grid),
                        _ => None,
                    },
                    "random, grid",
                )
                .unwrap_or_default(),
        },
        ExperimentKind::MultimodalL1 | ExperimentKind::MultimodalLabeled => DataSpec::Multimodal {
            n: c.positive_usize("n_samples", raw.n_samples, 128),
            noise_std: c.positive_f64("noise_std", raw.noise_std, 0.1),
            n_test: c.positive_usize("n_test", raw.n_test, 200),
        },
        ExperimentKind::Forecast => {
            let h_in = c.positive_usize("h_in", raw.h_in, 6);
            let h_out = c.positive_usize("h_out", raw.h_out, 3);
            let train_fraction = c.fraction("train_fraction", raw.train_fraction, datasets::DEFAULT_TRAIN_FRACTION, false);
            let source = match &raw.series_csv {
                Some(p) => {
                    let path = base_dir.join(p);
                    match datasets::load_csv_series(&path) {
                        Ok(s) if s.len() < h_in + h_out + 1 => c.push(
                            "series_csv",
                            format!("series has {} values, fewer than two windows of {h_in} + {h_out}", s.len()),
                        ),
                        Ok(_) => {}
                        Err(e) => c.push("series_csv", e.to_string()),
                    }
                    SeriesSource::Csv(path)
                }
                None => {
                    let len = c.positive_usize("series_len", raw.series_len, 2976);
                    if len < h_in + h_out + 1 {
                        c.push("series_len", format!("{len} is too short for windows of {h_in} + {h_out}"));
                    }
                    SeriesSource::Synthetic {
                        len,
                        period: c.positive_f64("season_period", raw.season_period, 12.0),
                        amplitude: raw.season_amplitude.unwrap_or(10.0),
                        trend: raw.trend.unwrap_or(0.002),
                        noise_std: c.positive_f64("series_noise", raw.series_noise, 1.0),
                    }
                }
            };
            DataSpec::Series {
                source,
                h_in,
                h_out,
                train_fraction,
            }
        }
    };

    // Primary.
    let default_primary = match kind {
        ExperimentKind::XsinxLinearPrimary => "linear",
        ExperimentKind::Forecast => "nbeats",
        _ => "mlp",
    };
    let activation = c
        .choice(
            "activation",
            raw.activation.as_deref(),
            "relu",
            |s| match s {
                "relu" => Some(Activation::Relu),
                "identity" => Some(Activation::Identity),
                _ => None,
            },
            "relu, identity",
        )
        .unwrap_or(Activation::Relu);
    let primary_name = raw.primary.as_deref().unwrap_or(default_primary);
    let (h_in, h_out) = match &data {
        DataSpec::Series { h_in, h_out, .. } => (*h_in, *h_out),
        _ => (1, 1),
    };
    let primary = match primary_name {
        "mlp" => {
            let arch = raw.primary_arch.as_deref().unwrap_or("[1,512,1]");
            match parse_widths(arch) {
                Some(w) if w.len() >= 2 && w[0] == h_in && *w.last().unwrap() == h_out => Some(PrimarySpec::Mlp {
                    widths: w,
                    activation,
                }),
                Some(w) if w.len() >= 2 => {
                    c.push(
                        "primary_arch",
                        format!(
                            "maps {}→{}, the data needs {h_in}→{h_out}",
                            w[0],
                            w.last().unwrap()
                        ),
                    );
                    None
                }
                _ => {
                    c.push("primary_arch", format!("{arch:?} is not a list of at least two positive widths"));
                    None
                }
            }
        }
        "linear" if h_in == 1 && h_out == 1 => Some(PrimarySpec::Linear),
        "linear" => {
            c.push("primary", "the linear primary is one-dimensional; use mlp or nbeats for series");
            None
        }
        "nbeats" => {
            let cfg = NBeatsConfig {
                input_len: h_in,
                horizon: h_out,
                blocks: c.positive_usize("nbeats_blocks", raw.nbeats_blocks, 3),
                width: c.positive_usize("nbeats_width", raw.nbeats_width, 64),
                depth: c.positive_usize("nbeats_depth", raw.nbeats_depth, 4),
                theta_dim: c.positive_usize("nbeats_theta_dim", raw.nbeats_theta_dim, 32),
                shared: raw.nbeats_shared.unwrap_or(true),
            };
            Some(PrimarySpec::NBeats(cfg))
        }
        other => {
            c.push("primary", format!("unknown value {other:?}; expected one of mlp, linear, nbeats"));
            None
        }
    };

    // Likelihood.
    let default_lik = match kind {
        ExperimentKind::MultimodalL1 => "l1",
        _ => "gaussian",
    };
    let default_sigma = match kind {
        ExperimentKind::MultimodalLabeled | ExperimentKind::Forecast => 0.1,
        _ => 0.01,
    };
    let likelihood = match raw.likelihood.as_deref().unwrap_or(default_lik) {
        "gaussian" => Some(Likelihood::Gaussian {
            sigma: c.positive_f64("sigma", raw.sigma, default_sigma),
        }),
        "l1" => Some(Likelihood::L1),
        "sse_l2" => {
            let lambda = raw.lambda.unwrap_or(0.0);
            if !(lambda >= 0.0 && lambda.is_finite()) {
                c.push("lambda", format!("must be non-negative, got {lambda}"));
            }
            Some(Likelihood::SseL2 { lambda })
        }
        other => {
            c.push("likelihood", format!("unknown value {other:?}; expected one of gaussian, l1, sse_l2"));
            None
        }
    };
    if raw.sigma.is_some() && !matches!(likelihood, Some(Likelihood::Gaussian { .. })) {
        c.push("sigma", "only used by the gaussian likelihood");
    }
    if raw.lambda.is_some() && !matches!(likelihood, Some(Likelihood::SseL2 { .. })) {
        c.push("lambda", "only used by the sse_l2 likelihood");
    }
    let loss_mode = c
        .choice(
            "loss_mode",
            raw.loss_mode.as_deref(),
            "neg_log_mean_prob",
            |s| match s {
                "neg_log_mean_prob" => Some(LossMode::NegLogMeanProb),
                "mean_prob" => Some(LossMode::MeanProb),
                _ => None,
            },
            "neg_log_mean_prob, mean_prob",
        )
        .unwrap_or_default();

    // Posterior.
    let default_post = match kind {
        ExperimentKind::Xsinx => "unconditioned",
        _ => "conditional",
    };
    let post_kind = c.choice(
        "posterior",
        raw.posterior.as_deref(),
        default_post,
        PosteriorKind::parse,
        "unconditioned, conditional, mdn, per_layer, per_layer_conditional",
    );
    let default_arch = if post_kind == Some(PosteriorKind::Mdn) { "[16]" } else { "[4,16,P]" };
    let arch = raw.posterior_arch.clone().unwrap_or_else(|| default_arch.to_string());
    let latent = c
        .choice(
            "latent",
            raw.latent.as_deref(),
            "uniform",
            |s| match s {
                "uniform" => Some(LatentBase::default()),
                "normal" => Some(LatentBase::StandardNormal),
                _ => None,
            },
            "uniform, normal",
        )
        .unwrap_or_default();
    if let (Some(pk), Some(p)) = (post_kind, &primary) {
        match build_primary(p) {
            Ok(model) => {
                let layout = model.layout();
                let result = match pk {
                    PosteriorKind::Mdn => MdnArch::parse(&arch, layout.total_len()).map(|_| ()),
                    PosteriorKind::PerLayer | PosteriorKind::PerLayerConditional => layout
                        .layer_ranges()
                        .iter()
                        .try_for_each(|r| HypernetArch::parse(&arch, r.len()).map(|_| ())),
                    _ => HypernetArch::parse(&arch, layout.total_len()).map(|_| ()),
                };
                if let Err(e) = result {
                    c.push("posterior_arch", e.to_string());
                }
            }
            Err(e) => c.push("primary", e.to_string()),
        }
    }
    let use_labels = kind == ExperimentKind::MultimodalLabeled;
    if use_labels && !post_kind.is_some_and(PosteriorKind::conditioned) {
        c.push("posterior", "label conditioning needs a conditioned posterior");
    }

    // Training.
    let default_epochs = match kind {
        ExperimentKind::Forecast => 100,
        _ => 1000,
    };
    let default_batch = match kind {
        ExperimentKind::Forecast => 128,
        k if k.is_multimodal() => 128,
        _ => 36,
    };
    let lr = c.positive_f64("lr", raw.lr, 0.01);
    let optimizer = c
        .choice(
            "optimizer",
            raw.optimizer.as_deref(),
            "adam",
            |s| match s {
                "adam" => Some(Optimizer::adam(lr)),
                "sgd" => Some(Optimizer::Sgd { lr }),
                _ => None,
            },
            "adam, sgd",
        )
        .unwrap_or(Optimizer::adam(lr));
    let clip_norm = raw.clip_norm.map(|v| c.positive_f64("clip_norm", Some(v), v));
    let holdout = if kind == ExperimentKind::Forecast { Holdout::Tail } else { Holdout::Random };
    let early_stopping = EarlyStopping {
        enabled: raw.early_stopping.unwrap_or(true),
        val_fraction: c.fraction("val_fraction", raw.val_fraction, 0.1, true),
        patience: raw.patience.unwrap_or(20),
        min_delta: {
            let v = raw.min_delta.unwrap_or(1e-4);
            if !(v >= 0.0 && v.is_finite()) {
                c.push("min_delta", format!("must be non-negative, got {v}"));
            }
            v
        },
        holdout,
    };
    let seed = seed_override.or(raw.seed).unwrap_or(0);
    let train = TrainConfig {
        epochs: c.positive_usize("epochs", raw.epochs, default_epochs),
        batch_size: c.positive_usize("batch_size", raw.batch_size, default_batch),
        mc_samples: c.positive_usize("mc_samples", raw.mc_samples, 10),
        optimizer,
        early_stopping,
        loss_mode,
        clip_norm,
        use_labels,
        seed,
    };
    let eval_samples = c.positive_usize("eval_samples", raw.eval_samples, 30);

    let out_dir = match out_override {
        Some(p) => p.to_path_buf(),
        None => match &raw.out_dir {
            Some(d) => base_dir.join(d),
            None => PathBuf::from("runs").join(kind.name()),
        },
    };

    let init_output_scale = c.positive_f64("init_output_scale", raw.init_output_scale, 0.1);
    if !c.errors.is_empty() {
        return Err(ConfigErrors(c.errors));
    }
    Ok(Experiment {
        kind,
        seed,
        out_dir,
        primary: primary.expect("checked"),
        posterior: PosteriorSpec {
            kind: post_kind.expect("checked"),
            arch,
            latent,
            degenerate: raw.degenerate.unwrap_or(false),
            init_output_scale,
        },
        likelihood: likelihood.expect("checked"),
        train,
        data,
        eval_samples,
    })
}
