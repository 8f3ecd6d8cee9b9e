//! Stateless primary models `f_θ(x)`.
//!
//! Parameters are inputs rather than owned state: a [`ThetaBatch`] holds
//! one flat θ row per group, and every group is evaluated with batched
//! matrix products. Two groupings exist:
//!
//! * [`Grouping::Shared`]: `L` θ samples, each applied to the whole input
//!   batch (unconditioned posteriors).
//! * [`Grouping::PerExample`]: one θ per (batch element, sample) pair, rows
//!   ordered batch-major (conditional posteriors).
//!
//! Whatever the grouping, [`PrimaryModel::forward`] returns predictions as
//! `[L, B, o]`.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Weight,
    Bias,
}

/// A named block of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub kind: SegmentKind,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Index of the layer the segment belongs to.
    pub layer: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Partition of a flat θ vector into weight matrices and bias vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaLayout {
    segments: Vec<Segment>,
    total_len: usize,
}

impl ThetaLayout {
    /// One `(W: out×in, b: out)` pair per `(in, out)` entry, in order.
    pub fn affine_layers(layers: &[(usize, usize)]) -> Self {
        let mut segments = Vec::with_capacity(layers.len() * 2);
        let mut offset = 0;
        for (i, &(fan_in, fan_out)) in layers.iter().enumerate() {
            assert!(fan_in > 0 && fan_out > 0, "layer widths must be positive");
            segments.push(Segment {
                name: format!("W{i}"),
                kind: SegmentKind::Weight,
                shape: vec![fan_out, fan_in],
                offset,
                layer: i,
            });
            offset += fan_in * fan_out;
            segments.push(Segment {
                name: format!("b{i}"),
                kind: SegmentKind::Bias,
                shape: vec![fan_out],
                offset,
                layer: i,
            });
            offset += fan_out;
        }
        Self {
            segments,
            total_len: offset,
        }
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn num_layers(&self) -> usize {
        self.segments.last().map_or(0, |s| s.layer + 1)
    }

    /// Contiguous θ range covered by each layer.
    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        (0..self.num_layers())
            .map(|l| {
                let mut it = self.segments.iter().filter(|s| s.layer == l);
                let first = it.next().expect("layer has segments");
                let end = it.last().unwrap_or(first).range().end;
                first.offset..end
            })
            .collect()
    }

    /// Splits θ into one tensor per segment.
    pub fn slice(&self, theta: &[f64]) -> Result<Vec<Tensor>> {
        if theta.len() != self.total_len {
            return Err(Error::contract(format!(
                "θ has length {}, layout expects {}",
                theta.len(),
                self.total_len
            )));
        }
        self.segments
            .iter()
            .map(|s| Tensor::new(s.shape.clone(), theta[s.range()].to_vec()))
            .collect()
    }

    /// Inverse of [`ThetaLayout::slice`].
    pub fn flatten(&self, parts: &[Tensor]) -> Result<Vec<f64>> {
        if parts.len() != self.segments.len() {
            return Err(Error::contract("segment count mismatch"));
        }
        let mut out = Vec::with_capacity(self.total_len);
        for (s, p) in self.segments.iter().zip(parts) {
            if p.shape() != s.shape.as_slice() {
                return Err(Error::Dimension {
                    op: "ThetaLayout::flatten",
                    lhs: s.shape.clone(),
                    rhs: p.shape().to_vec(),
                });
            }
            out.extend_from_slice(p.data());
        }
        Ok(out)
    }

    /// A conventional initial θ: fan-in scaled uniform weights, zero biases.
    pub fn init_theta<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut theta = vec![0.0; self.total_len];
        for s in &self.segments {
            if s.kind == SegmentKind::Weight {
                let bound = 1.0 / (s.shape[1] as f64).sqrt();
                for v in &mut theta[s.range()] {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        theta
    }
}

/// How θ rows map onto inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    /// `samples` θ rows, each shared by every batch element.
    Shared { samples: usize },
    /// `batch × samples` θ rows, batch-major.
    PerExample { batch: usize, samples: usize },
}

impl Grouping {
    pub fn groups(&self) -> usize {
        match *self {
            Grouping::Shared { samples } => samples,
            Grouping::PerExample { batch, samples } => batch * samples,
        }
    }

    pub fn samples(&self) -> usize {
        match *self {
            Grouping::Shared { samples } | Grouping::PerExample { samples, .. } => samples,
        }
    }
}

/// θ samples on a tape: `values` has shape `[groups, P]`.
#[derive(Debug, Clone, Copy)]
pub struct ThetaBatch {
    pub values: Var,
    pub grouping: Grouping,
}

impl ThetaBatch {
    pub fn check(&self, tape: &Tape, theta_len: usize) -> Result<()> {
        let shape = tape.shape(self.values);
        if shape != [self.grouping.groups(), theta_len] {
            return Err(Error::contract(format!(
                "θ batch shape {shape:?} does not match grouping {:?} with P = {theta_len}",
                self.grouping
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, tape: &Tape, v: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(v),
            Activation::Identity => v,
        }
    }
}

/// A predictive model whose parameters arrive as a [`ThetaBatch`].
pub trait PrimaryModel {
    fn layout(&self) -> &ThetaLayout;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Evaluates `theta: [G, P]` on `input: [G, d, n]`, returning `[G, o, n]`.
    fn forward_grouped(&self, tape: &Tape, theta: Var, input: Var) -> Result<Var>;

    /// Evaluates θ samples on `x: [B, d]`, returning predictions `[L, B, o]`.
    fn forward(&self, tape: &Tape, theta: &ThetaBatch, x: &Tensor) -> Result<Var> {
        theta.check(tape, self.layout().total_len())?;
        let d = self.input_dim();
        if x.rank() != 2 || x.shape()[1] != d {
            return Err(Error::Dimension {
                op: "PrimaryModel::forward",
                lhs: vec![0, d],
                rhs: x.shape().to_vec(),
            });
        }
        let b = x.shape()[0];
        let o = self.output_dim();
        match theta.grouping {
            Grouping::Shared { samples } => {
                // xᵀ tiled over samples: [L, d, B].
                let mut data = Vec::with_capacity(samples * d * b);
                for _ in 0..samples {
                    for j in 0..d {
                        data.extend((0..b).map(|i| x.data()[i * d + j]));
                    }
                }
                let input = tape.constant(Tensor::new(vec![samples, d, b], data)?);
                let out = self.forward_grouped(tape, theta.values, input)?;
                tape.permute(out, &[0, 2, 1])
            }
            Grouping::PerExample { batch, samples } => {
                if batch != b {
                    return Err(Error::contract(format!(
                        "θ batch built for {batch} examples, got {b}"
                    )));
                }
                let mut data = Vec::with_capacity(batch * samples * d);
                for i in 0..batch {
                    for _ in 0..samples {
                        data.extend_from_slice(x.row(i));
                    }
                }
                let input = tape.constant(Tensor::new(vec![batch * samples, d, 1], data)?);
                let out = self.forward_grouped(tape, theta.values, input)?;
                let out = tape.reshape(out, [batch, samples, o])?;
                tape.permute(out, &[1, 0, 2])
            }
        }
    }
}

/// θ views of one affine layer, shaped for batched products.
#[derive(Debug, Clone, Copy)]
struct AffineVars {
    weight: Var,
    bias: Var,
}

impl AffineVars {
    fn take(tape: &Tape, theta: Var, layout: &ThetaLayout, layer: usize, groups: usize) -> Result<Self> {
        let mut segs = layout.segments().iter().filter(|s| s.layer == layer);
        let (w, b) = match (segs.next(), segs.next()) {
            (Some(w), Some(b)) if w.kind == SegmentKind::Weight && b.kind == SegmentKind::Bias => (w, b),
            _ => return Err(Error::contract(format!("layer {layer} is not affine"))),
        };
        let (o, d) = (w.shape[0], w.shape[1]);
        let weight = tape.reshape(tape.narrow(theta, 1, w.offset, o * d)?, [groups, o, d])?;
        let bias = tape.reshape(tape.narrow(theta, 1, b.offset, o)?, [groups, o, 1])?;
        Ok(Self { weight, bias })
    }

    fn apply(&self, tape: &Tape, h: Var) -> Result<Var> {
        tape.add(tape.batched_matmul(self.weight, h)?, self.bias)
    }
}

fn group_count(tape: &Tape, theta: Var, layout: &ThetaLayout) -> Result<usize> {
    let shape = tape.shape(theta);
    if shape.len() != 2 || shape[1] != layout.total_len() {
        return Err(Error::contract(format!(
            "θ shape {shape:?} does not match layout length {}",
            layout.total_len()
        )));
    }
    Ok(shape[0])
}

/// `y = Wx + b`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    layout: ThetaLayout,
    input_dim: usize,
    output_dim: usize,
}

impl LinearModel {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            layout: ThetaLayout::affine_layers(&[(input_dim, output_dim)]),
            input_dim,
            output_dim,
        }
    }
}

impl PrimaryModel for LinearModel {
    fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn forward_grouped(&self, tape: &Tape, theta: Var, input: Var) -> Result<Var> {
        let g = group_count(tape, theta, &self.layout)?;
        AffineVars::take(tape, theta, &self.layout, 0, g)?.apply(tape, input)
    }
}

/// Multilayer perceptron with a linear output layer.
#[derive(Debug, Clone)]
pub struct MlpModel {
    layout: ThetaLayout,
    widths: Vec<usize>,
    activation: Activation,
}

impl MlpModel {
    /// `widths` lists every layer width including input and output, e.g.
    /// `[1, 512, 1]`.
    pub fn new(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::contract(format!("invalid MLP widths {widths:?}")));
        }
        let pairs: Vec<(usize, usize)> = widths.windows(2).map(|w| (w[0], w[1])).collect();
        Ok(Self {
            layout: ThetaLayout::affine_layers(&pairs),
            widths: widths.to_vec(),
            activation,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }
}

impl PrimaryModel for MlpModel {
    fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    fn input_dim(&self) -> usize {
        self.widths[0]
    }

    fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    fn forward_grouped(&self, tape: &Tape, theta: Var, input: Var) -> Result<Var> {
        let g = group_count(tape, theta, &self.layout)?;
        let last = self.widths.len() - 2;
        let mut h = input;
        for layer in 0..=last {
            h = AffineVars::take(tape, theta, &self.layout, layer, g)?.apply(tape, h)?;
            if layer < last {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }
}

/// Generic-block N-BEATS configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBeatsConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub blocks: usize,
    /// Width of the fully connected stack.
    pub width: usize,
    /// Number of fully connected ReLU layers per block.
    pub depth: usize,
    /// Dimension of the basis expansion coefficients.
    pub theta_dim: usize,
    /// All blocks reuse one set of parameters.
    pub shared: bool,
}

impl Default for NBeatsConfig {
    fn default() -> Self {
        Self {
            input_len: 6,
            horizon: 3,
            blocks: 3,
            width: 64,
            depth: 4,
            theta_dim: 32,
            shared: true,
        }
    }
}

/// Doubly residual stack of generic N-BEATS blocks.
///
/// Each block maps its residual input through `depth` ReLU layers to a
/// coefficient vector, which two linear bases expand into a backcast and a
/// forecast. The next block sees `residual - backcast`; the output is the
/// sum of all forecasts.
#[derive(Debug, Clone)]
pub struct NBeatsModel {
    cfg: NBeatsConfig,
    layout: ThetaLayout,
}

impl NBeatsModel {
    pub fn new(cfg: NBeatsConfig) -> Result<Self> {
        let NBeatsConfig {
            input_len,
            horizon,
            blocks,
            width,
            depth,
            theta_dim,
            shared,
        } = cfg;
        if horizon == 0 || input_len == 0 || blocks == 0 || width == 0 || depth == 0 || theta_dim == 0 {
            return Err(Error::contract(format!("N-BEATS extents must be positive: {cfg:?}")));
        }
        let mut block = vec![(input_len, width)];
        block.extend(std::iter::repeat_n((width, width), depth - 1));
        block.extend([(width, theta_dim), (theta_dim, input_len), (theta_dim, horizon)]);
        let copies = if shared { 1 } else { blocks };
        let layers: Vec<(usize, usize)> = block.iter().copied().cycle().take(block.len() * copies).collect();
        Ok(Self {
            layout: ThetaLayout::affine_layers(&layers),
            cfg,
        })
    }

    pub fn config(&self) -> &NBeatsConfig {
        &self.cfg
    }

    fn layers_per_block(&self) -> usize {
        self.cfg.depth + 3
    }
}

impl PrimaryModel for NBeatsModel {
    fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    fn input_dim(&self) -> usize {
        self.cfg.input_len
    }

    fn output_dim(&self) -> usize {
        self.cfg.horizon
    }

    fn forward_grouped(&self, tape: &Tape, theta: Var, input: Var) -> Result<Var> {
        let g = group_count(tape, theta, &self.layout)?;
        let per_block = self.layers_per_block();
        let copies = if self.cfg.shared { 1 } else { self.cfg.blocks };
        let params: Vec<Vec<AffineVars>> = (0..copies)
            .map(|c| {
                (0..per_block)
                    .map(|l| AffineVars::take(tape, theta, &self.layout, c * per_block + l, g))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;

        let mut residual = input;
        let mut output: Option<Var> = None;
        for blk in 0..self.cfg.blocks {
            let p = &params[if self.cfg.shared { 0 } else { blk }];
            let mut h = residual;
            for fc in &p[..self.cfg.depth] {
                h = tape.relu(fc.apply(tape, h)?);
            }
            let coeffs = p[self.cfg.depth].apply(tape, h)?;
            let backcast = p[self.cfg.depth + 1].apply(tape, coeffs)?;
            let forecast = p[self.cfg.depth + 2].apply(tape, coeffs)?;
            residual = tape.sub(residual, backcast)?;
            output = Some(match output {
                None => forecast,
                Some(acc) => tape.add(acc, forecast)?,
            });
        }
        Ok(output.expect("at least one block"))
    }
}
