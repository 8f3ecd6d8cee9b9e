//! Posterior models: trainable generators of primary-model parameters.
//!
//! * [`UnconditionedPosterior`]: θ = g_φ(z).
//! * [`ConditionalPosterior`]: θ = g_φ(z, c) for per-example conditioning
//!   features `c` (the input, optionally with labels).
//! * [`MdnPosterior`]: θ = μ(c) + σ(c) ⊙ ε with a single Gaussian component.
//! * [`PerLayerPosterior`]: independent generators for disjoint θ ranges.
//!
//! All samplers are reparameterized: the randomness (z or ε) is drawn up
//! front and enters the tape as a constant.

use std::fmt;
use std::ops::Range;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::primary::{Activation, Grouping, ThetaBatch};
use crate::tensor::Tensor;

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters enter the tape as constants.
    pub frozen: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            frozen: false,
        }
    }
}

/// Base distribution of the latent noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentBase {
    Uniform { lo: f64, hi: f64 },
    StandardNormal,
}

impl Default for LatentBase {
    fn default() -> Self {
        LatentBase::Uniform { lo: -1.0, hi: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub dim: usize,
    pub base: LatentBase,
}

impl LatentSpec {
    /// `rows` i.i.d. draws, shape `[rows, dim]`.
    pub fn sample(&self, rows: usize, rng: &mut dyn RngCore) -> Tensor {
        let n = rows * self.dim;
        let data: Vec<f64> = match self.base {
            LatentBase::Uniform { lo, hi } => (0..n).map(|_| rng.random_range(lo..hi)).collect(),
            LatentBase::StandardNormal => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        };
        Tensor::new(vec![rows, self.dim], data).expect("latent shape")
    }
}

/// One entry of a bracket architecture string such as `[4,16,P]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BracketItem {
    Width(usize),
    /// `P` or `N`: the θ length of the target.
    ThetaLen,
}

fn parse_bracket(s: &str) -> Result<Vec<BracketItem>> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| Error::contract(format!("architecture {s:?} must be written as [a,b,...]")))?;
    let items = inner
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|tok| match tok {
            "P" | "N" => Ok(BracketItem::ThetaLen),
            _ => match tok.parse::<usize>() {
                Ok(0) | Err(_) => Err(Error::contract(format!(
                    "architecture {s:?}: {tok:?} is not a positive width or P/N"
                ))),
                Ok(n) => Ok(BracketItem::Width(n)),
            },
        })
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(Error::contract(format!("architecture {s:?} is empty")));
    }
    Ok(items)
}

/// Hypernetwork architecture resolved against a θ length.
///
/// Bracket notation lists the latent width first, then hidden widths,
/// then optionally the output width. `P` (or `N`) stands for the θ
/// length. The output width is always the θ length: a final `P`/`N`, or a
/// final integer in a list of three or more entries, names it explicitly
/// and must match; shorter lists leave it implicit. So `[4,16,P]`,
/// `[5,16]` (latent 5, one hidden layer of 16) and `[1]` (a linear map of
/// one latent variable) are all valid.
#[derive(Debug, Clone, PartialEq)]
pub struct HypernetArch {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
}

impl HypernetArch {
    pub fn parse(s: &str, theta_len: usize) -> Result<Self> {
        let items = parse_bracket(s)?;
        let resolve = |it: BracketItem| match it {
            BracketItem::Width(n) => n,
            BracketItem::ThetaLen => theta_len,
        };
        let explicit_out = items.len() >= 3 || matches!(items.last(), Some(BracketItem::ThetaLen) if items.len() >= 2);
        let (body, out) = if explicit_out {
            let (last, body) = items.split_last().expect("non-empty");
            (body, Some(resolve(*last)))
        } else {
            (&items[..], None)
        };
        if let Some(out) = out {
            if out != theta_len {
                return Err(Error::contract(format!(
                    "posterior output length {out} != primary parameter count P = {theta_len}"
                )));
            }
        }
        Ok(Self {
            latent_dim: resolve(body[0]),
            hidden: body[1..].iter().map(|&it| resolve(it)).collect(),
            output: theta_len,
            activation: Activation::Relu,
        })
    }
}

impl fmt::Display for HypernetArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}", self.latent_dim)?;
        for h in &self.hidden {
            write!(f, ",{h}")?;
        }
        write!(f, ",{}]", self.output)
    }
}

/// Initialization of a generator's parameters.
#[derive(Debug, Clone, Default)]
pub struct InitSpec {
    /// Bias of the output layer, i.e. the θ produced when the last hidden
    /// activation vanishes. Zeros when absent.
    pub theta_center: Option<Vec<f64>>,
    /// Multiplier on the fan-in scaled output-layer weights.
    pub output_scale: Option<f64>,
}

const DEFAULT_OUTPUT_SCALE: f64 = 0.1;

fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut dyn RngCore) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("matrix shape")
}

/// Dense layers stored as `[in, out]` weights and `[1, out]` biases.
fn dense_params(
    prefix: &str,
    widths: &[usize],
    init: &InitSpec,
    rng: &mut dyn RngCore,
) -> Result<Vec<Param>> {
    let last = widths.len() - 2;
    let mut params = Vec::with_capacity(2 * (last + 1));
    for (i, w) in widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let mut bound = 1.0 / (fan_in as f64).sqrt();
        if i == last {
            bound *= init.output_scale.unwrap_or(DEFAULT_OUTPUT_SCALE);
        }
        params.push(Param::new(format!("{prefix}W{i}"), uniform_matrix(fan_in, fan_out, bound, rng)));
        let bias = match (&init.theta_center, i == last) {
            (Some(c), true) => {
                if c.len() != fan_out {
                    return Err(Error::contract(format!(
                        "θ center has length {}, output width is {fan_out}",
                        c.len()
                    )));
                }
                Tensor::new(vec![1, fan_out], c.clone())?
            }
            _ => Tensor::zeros(vec![1, fan_out]),
        };
        params.push(Param::new(format!("{prefix}b{i}"), bias));
    }
    Ok(params)
}

/// Applies dense layers (`vars` = W0, b0, W1, b1, …) to `h: [G, in]`.
fn dense_forward(tape: &Tape, vars: &[Var], h: Var, activation: Activation) -> Result<Var> {
    let layers = vars.len() / 2;
    let mut h = h;
    for (i, wb) in vars.chunks(2).enumerate() {
        h = tape.add(tape.matmul(h, wb[0])?, wb[1])?;
        if i + 1 < layers && activation == Activation::Relu {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// A generator of θ samples.
pub trait PosteriorModel {
    /// Length of each generated θ vector.
    fn theta_len(&self) -> usize;

    /// Width of the per-example conditioning features; 0 when the model
    /// ignores inputs.
    fn cond_dim(&self) -> usize;

    fn params(&self) -> Vec<&Param>;

    fn params_mut(&mut self) -> Vec<&mut Param>;

    /// Draws `samples` θ vectors (per example when conditioned). `vars`
    /// are this model's parameters bound on `tape`, in [`Self::params`]
    /// order.
    fn sample(
        &self,
        tape: &Tape,
        vars: &[Var],
        cond: Option<&Tensor>,
        samples: usize,
        rng: &mut dyn RngCore,
    ) -> Result<ThetaBatch>;

    /// Zeroes and freezes every weight that reads the random input, so the
    /// generator emits the same θ for every draw.
    fn make_degenerate(&mut self);
}

/// Registers a model's parameters on a tape; frozen ones become constants.
pub fn bind_params(tape: &Tape, model: &dyn PosteriorModel) -> Vec<Var> {
    model
        .params()
        .into_iter()
        .map(|p| {
            if p.frozen {
                tape.constant(p.value.clone())
            } else {
                tape.param(p.value.clone())
            }
        })
        .collect()
}

/// Draws θ samples outside of training: `[groups, P]` values and their grouping.
pub fn sample_theta(
    model: &dyn PosteriorModel,
    cond: Option<&Tensor>,
    samples: usize,
    rng: &mut dyn RngCore,
) -> Result<(Tensor, Grouping)> {
    let tape = Tape::new();
    let vars: Vec<Var> = model.params().into_iter().map(|p| tape.constant(p.value.clone())).collect();
    let batch = model.sample(&tape, &vars, cond, samples, rng)?;
    Ok((tape.value(batch.values), batch.grouping))
}

fn check_samples(samples: usize) -> Result<()> {
    if samples == 0 {
        return Err(Error::contract("at least one Monte-Carlo sample is required"));
    }
    Ok(())
}

fn check_cond<'a>(cond: Option<&'a Tensor>, dim: usize) -> Result<&'a Tensor> {
    let c = cond.ok_or_else(|| Error::contract("conditioned posterior needs conditioning features"))?;
    if c.rank() != 2 || c.shape()[1] != dim {
        return Err(Error::contract(format!(
            "conditioning features have shape {:?}, posterior expects width {dim}",
            c.shape()
        )));
    }
    Ok(c)
}

/// MLP hypernetwork shared by the unconditioned and conditional posteriors.
#[derive(Debug, Clone)]
pub struct Hypernet {
    latent: LatentSpec,
    cond_dim: usize,
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<Param>,
}

impl Hypernet {
    pub fn new(
        arch: &HypernetArch,
        base: LatentBase,
        cond_dim: usize,
        init: &InitSpec,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let mut widths = vec![arch.latent_dim + cond_dim];
        widths.extend(&arch.hidden);
        widths.push(arch.output);
        let params = dense_params("", &widths, init, rng)?;
        Ok(Self {
            latent: LatentSpec {
                dim: arch.latent_dim,
                base,
            },
            cond_dim,
            widths,
            activation: arch.activation,
            params,
        })
    }

    pub fn latent(&self) -> &LatentSpec {
        &self.latent
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Maps generator inputs `[G, latent + cond]` to θ rows `[G, P]`.
    pub fn forward(&self, tape: &Tape, vars: &[Var], input: Var) -> Result<Var> {
        dense_forward(tape, vars, input, self.activation)
    }

    fn zero_input_weights(&mut self) {
        let w0 = &mut self.params[0];
        w0.value.data_mut().fill(0.0);
        w0.frozen = true;
    }
}

/// θ = g_φ(z), independent of the input.
#[derive(Debug, Clone)]
pub struct UnconditionedPosterior {
    net: Hypernet,
}

impl UnconditionedPosterior {
    pub fn new(arch: &HypernetArch, base: LatentBase, init: &InitSpec, rng: &mut dyn RngCore) -> Result<Self> {
        Ok(Self {
            net: Hypernet::new(arch, base, 0, init, rng)?,
        })
    }

    pub fn net(&self) -> &Hypernet {
        &self.net
    }
}

impl PosteriorModel for UnconditionedPosterior {
    fn theta_len(&self) -> usize {
        *self.net.widths.last().expect("widths")
    }

    fn cond_dim(&self) -> usize {
        0
    }

    fn params(&self) -> Vec<&Param> {
        self.net.params.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params.iter_mut().collect()
    }

    fn sample(
        &self,
        tape: &Tape,
        vars: &[Var],
        _cond: Option<&Tensor>,
        samples: usize,
        rng: &mut dyn RngCore,
    ) -> Result<ThetaBatch> {
        check_samples(samples)?;
        let z = tape.constant(self.net.latent.sample(samples, rng));
        Ok(ThetaBatch {
            values: self.net.forward(tape, vars, z)?,
            grouping: Grouping::Shared { samples },
        })
    }

    fn make_degenerate(&mut self) {
        self.net.zero_input_weights();
    }
}

/// θ = g_φ(z, c): one θ per (example, sample).
#[derive(Debug, Clone)]
pub struct ConditionalPosterior {
    net: Hypernet,
}

impl ConditionalPosterior {
    pub fn new(
        arch: &HypernetArch,
        base: LatentBase,
        cond_dim: usize,
        init: &InitSpec,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if cond_dim == 0 {
            return Err(Error::contract("conditional posterior needs a positive conditioning width"));
        }
        Ok(Self {
            net: Hypernet::new(arch, base, cond_dim, init, rng)?,
        })
    }

    pub fn net(&self) -> &Hypernet {
        &self.net
    }

    /// Generator inputs `[B·L, latent + cond]`: z rows drawn batch-major,
    /// each followed by its example's features.
    pub fn generator_input(&self, cond: &Tensor, samples: usize, rng: &mut dyn RngCore) -> Result<Tensor> {
        let b = cond.shape()[0];
        let z = self.net.latent.sample(b * samples, rng);
        let dz = self.net.latent.dim;
        let width = dz + self.net.cond_dim;
        let mut data = Vec::with_capacity(b * samples * width);
        for i in 0..b {
            for l in 0..samples {
                data.extend_from_slice(z.row(i * samples + l));
                data.extend_from_slice(cond.row(i));
            }
        }
        Tensor::new(vec![b * samples, width], data)
    }
}

impl PosteriorModel for ConditionalPosterior {
    fn theta_len(&self) -> usize {
        *self.net.widths.last().expect("widths")
    }

    fn cond_dim(&self) -> usize {
        self.net.cond_dim
    }

    fn params(&self) -> Vec<&Param> {
        self.net.params.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params.iter_mut().collect()
    }

    fn sample(
        &self,
        tape: &Tape,
        vars: &[Var],
        cond: Option<&Tensor>,
        samples: usize,
        rng: &mut dyn RngCore,
    ) -> Result<ThetaBatch> {
        check_samples(samples)?;
        let cond = check_cond(cond, self.net.cond_dim)?;
        let input = tape.constant(self.generator_input(cond, samples, rng)?);
        Ok(ThetaBatch {
            values: self.net.forward(tape, vars, input)?,
            grouping: Grouping::PerExample {
                batch: cond.shape()[0],
                samples,
            },
        })
    }

    fn make_degenerate(&mut self) {
        self.net.zero_input_weights();
    }
}

/// Architecture of an MDN head: hidden trunk widths over the conditioning
/// features. Bracket form lists the trunk, optionally ending in `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct MdnArch {
    pub trunk: Vec<usize>,
    pub output: usize,
}

impl MdnArch {
    pub fn parse(s: &str, theta_len: usize) -> Result<Self> {
        let mut items = parse_bracket(s)?;
        if items.last() == Some(&BracketItem::ThetaLen) {
            items.pop();
        }
        let trunk = items
            .into_iter()
            .map(|it| match it {
                BracketItem::Width(n) => Ok(n),
                BracketItem::ThetaLen => Err(Error::contract(format!("MDN architecture {s:?}: P only allowed last"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            trunk,
            output: theta_len,
        })
    }
}

/// Initial σ of the MDN head.
const MDN_INIT_SIGMA: f64 = 0.05;
/// σ used when the head is collapsed onto its mean.
pub const MDN_COLLAPSED_SIGMA: f64 = 1e-12;

/// Single-component Gaussian mixture density head over θ.
#[derive(Debug, Clone)]
pub struct MdnPosterior {
    cond_dim: usize,
    theta_len: usize,
    trunk_layers: usize,
    params: Vec<Param>,
}

impl MdnPosterior {
    pub fn new(arch: &MdnArch, cond_dim: usize, init: &InitSpec, rng: &mut dyn RngCore) -> Result<Self> {
        if cond_dim == 0 {
            return Err(Error::contract("MDN posterior needs a positive conditioning width"));
        }
        let mut trunk_widths = vec![cond_dim];
        trunk_widths.extend(&arch.trunk);
        let mut params = Vec::new();
        for (i, w) in trunk_widths.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            params.push(Param::new(format!("trunk.W{i}"), uniform_matrix(w[0], w[1], bound, rng)));
            params.push(Param::new(format!("trunk.b{i}"), Tensor::zeros(vec![1, w[1]])));
        }
        let feat = *trunk_widths.last().expect("non-empty");
        let p = arch.output;
        let scale = init.output_scale.unwrap_or(DEFAULT_OUTPUT_SCALE) / (feat as f64).sqrt();
        let mu_bias = match &init.theta_center {
            Some(c) if c.len() == p => Tensor::new(vec![1, p], c.clone())?,
            Some(c) => {
                return Err(Error::contract(format!("θ center has length {}, expected {p}", c.len())));
            }
            None => Tensor::zeros(vec![1, p]),
        };
        params.push(Param::new("mu.W", uniform_matrix(feat, p, scale, rng)));
        params.push(Param::new("mu.b", mu_bias));
        params.push(Param::new("log_sigma.W", uniform_matrix(feat, p, scale, rng)));
        params.push(Param::new("log_sigma.b", Tensor::full(vec![1, p], MDN_INIT_SIGMA.ln())));
        Ok(Self {
            cond_dim,
            theta_len: p,
            trunk_layers: trunk_widths.len() - 1,
            params,
        })
    }

    /// Mean and log-scale of θ for every conditioning row: `([B,P], [B,P])`.
    pub fn heads(&self, tape: &Tape, vars: &[Var], cond: Var) -> Result<(Var, Var)> {
        let t = 2 * self.trunk_layers;
        let mut h = cond;
        for wb in vars[..t].chunks(2) {
            h = tape.relu(tape.add(tape.matmul(h, wb[0])?, wb[1])?);
        }
        let mu = tape.add(tape.matmul(h, vars[t])?, vars[t + 1])?;
        let log_sigma = tape.add(tape.matmul(h, vars[t + 2])?, vars[t + 3])?;
        Ok((mu, log_sigma))
    }

    /// Pins σ to [`MDN_COLLAPSED_SIGMA`] so samples equal the mean.
    pub fn collapse_sigma(&mut self) {
        let n = self.params.len();
        self.params[n - 2].value.data_mut().fill(0.0);
        self.params[n - 2].frozen = true;
        self.params[n - 1].value.data_mut().fill(MDN_COLLAPSED_SIGMA.ln());
        self.params[n - 1].frozen = true;
    }
}

impl PosteriorModel for MdnPosterior {
    fn theta_len(&self) -> usize {
        self.theta_len
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn params(&self) -> Vec<&Param> {
        self.params.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.params.iter_mut().collect()
    }

    fn sample(
        &self,
        tape: &Tape,
        vars: &[Var],
        cond: Option<&Tensor>,
        samples: usize,
        rng: &mut dyn RngCore,
    ) -> Result<ThetaBatch> {
        check_samples(samples)?;
        let cond = check_cond(cond, self.cond_dim)?;
        let b = cond.shape()[0];
        let p = self.theta_len;
        let (mu, log_sigma) = self.heads(tape, vars, tape.constant(cond.clone()))?;
        let sigma = tape.exp(log_sigma);
        let eps: Vec<f64> = (0..b * samples * p).map(|_| StandardNormal.sample(rng)).collect();
        let eps = tape.constant(Tensor::new(vec![b, samples, p], eps)?);
        let spread = tape.mul(eps, tape.reshape(sigma, [b, 1, p])?)?;
        let theta = tape.add(spread, tape.reshape(mu, [b, 1, p])?)?;
        Ok(ThetaBatch {
            values: tape.reshape(theta, [b * samples, p])?,
            grouping: Grouping::PerExample { batch: b, samples },
        })
    }

    fn make_degenerate(&mut self) {
        self.params[0].value.data_mut().fill(0.0);
        self.params[0].frozen = true;
        self.collapse_sigma();
    }
}

/// Independent generators for disjoint, contiguous θ ranges.
pub struct PerLayerPosterior {
    parts: Vec<(Range<usize>, Box<dyn PosteriorModel>)>,
    theta_len: usize,
}

impl fmt::Debug for PerLayerPosterior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PerLayerPosterior")
            .field("ranges", &self.parts.iter().map(|(r, _)| r.clone()).collect::<Vec<_>>())
            .field("theta_len", &self.theta_len)
            .finish()
    }
}

/// Builds a [`PerLayerPosterior`]; the ranges must tile `0..theta_len`
/// without gaps or overlaps.
pub fn compose_per_layer(
    parts: Vec<(Range<usize>, Box<dyn PosteriorModel>)>,
    theta_len: usize,
) -> Result<PerLayerPosterior> {
    let mut parts = parts;
    parts.sort_by_key(|(r, _)| r.start);
    let mut expected = 0;
    let cond_dim = parts.first().map_or(0, |(_, m)| m.cond_dim());
    for (r, m) in &parts {
        if r.start != expected {
            return Err(Error::contract(format!(
                "θ segments leave a gap or overlap at {expected} (next segment starts at {})",
                r.start
            )));
        }
        if m.theta_len() != r.len() {
            return Err(Error::contract(format!(
                "sub-posterior emits {} values for segment {r:?}",
                m.theta_len()
            )));
        }
        if m.cond_dim() != cond_dim {
            return Err(Error::contract("sub-posteriors must share one conditioning width"));
        }
        expected = r.end;
    }
    if expected != theta_len || parts.is_empty() {
        return Err(Error::contract(format!(
            "θ segments cover 0..{expected}, primary needs 0..{theta_len}"
        )));
    }
    Ok(PerLayerPosterior { parts, theta_len })
}

impl PerLayerPosterior {
    pub fn parts(&self) -> impl Iterator<Item = (&Range<usize>, &dyn PosteriorModel)> {
        self.parts.iter().map(|(r, m)| (r, m.as_ref()))
    }
}

impl PosteriorModel for PerLayerPosterior {
    fn theta_len(&self) -> usize {
        self.theta_len
    }

    fn cond_dim(&self) -> usize {
        self.parts[0].1.cond_dim()
    }

    fn params(&self) -> Vec<&Param> {
        self.parts.iter().flat_map(|(_, m)| m.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.parts.iter_mut().flat_map(|(_, m)| m.params_mut()).collect()
    }

    fn sample(
        &self,
        tape: &Tape,
        vars: &[Var],
        cond: Option<&Tensor>,
        samples: usize,
        rng: &mut dyn RngCore,
    ) -> Result<ThetaBatch> {
        let mut offset = 0;
        let mut pieces = Vec::with_capacity(self.parts.len());
        let mut grouping = None;
        for (_, m) in &self.parts {
            let n = m.params().len();
            let tb = m.sample(tape, &vars[offset..offset + n], cond, samples, rng)?;
            offset += n;
            grouping = Some(tb.grouping);
            pieces.push(tb.values);
        }
        Ok(ThetaBatch {
            values: tape.concat(&pieces, 1)?,
            grouping: grouping.expect("at least one part"),
        })
    }

    fn make_degenerate(&mut self) {
        for (_, m) in &mut self.parts {
            m.make_degenerate();
        }
    }
}
