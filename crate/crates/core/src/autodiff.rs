//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to a [`Tape`] in creation order and
//! returns a lightweight [`Var`] handle. [`Tape::backward`] walks the nodes
//! in exact reverse creation order and accumulates gradients into every
//! node that requires them. A tape belongs to one forward/backward pass;
//! the trainer builds a fresh one per optimizer step.
//!
//! ```
//! use postpred::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.square(x);
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item().unwrap(), 6.0);
//! ```

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{
    axis_blocks, broadcast_map, broadcast_shape, gemm, gemm_nt_acc, gemm_tn_acc, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Neg,
    Relu,
    Abs,
    Square,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchedMatMul {
        a: Var,
        b: Var,
        g: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        a_map: Option<Vec<usize>>,
        b_map: Option<Vec<usize>>,
    },
    Unary {
        kind: Unary,
        a: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Shift {
        a: Var,
    },
    Sum {
        a: Var,
        axis: Option<usize>,
        scale: f64,
    },
    LogSumExp {
        a: Var,
        axis: usize,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient, absent when no backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * n];
            gemm(ta.data(), tb.data(), m, k, n, &mut out);
            (Tensor::new(vec![m, n], out)?, m, k, n)
        };
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Independent products `a[g]·b[g]` for `a: [G×m×k]`, `b: [G×k×n]`.
    ///
    /// Each slice uses the same kernel as [`Tape::matmul`], so the result is
    /// bit-identical to a loop of per-slice products.
    pub fn batched_matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, g, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(Error::Dimension {
                    op: "batched_matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut out = vec![0.0; g * m * n];
            for s in 0..g {
                gemm(
                    &ta.data()[s * m * k..(s + 1) * m * k],
                    &tb.data()[s * k * n..(s + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[s * m * n..(s + 1) * m * n],
                );
            }
            (Tensor::new(vec![g, m, n], out)?, g, m, k, n)
        };
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::BatchedMatMul { a, b, g, m, k, n }, rg))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (value, a_map, b_map) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let out_shape =
                broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::Dimension {
                    op: match kind {
                        Binary::Add => "add",
                        Binary::Sub => "sub",
                        Binary::Mul => "mul",
                    },
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                })?;
            let a_map = broadcast_map(ta.shape(), &out_shape);
            let b_map = broadcast_map(tb.shape(), &out_shape);
            let len: usize = out_shape.iter().product();
            let f = match kind {
                Binary::Add => |x: f64, y: f64| x + y,
                Binary::Sub => |x: f64, y: f64| x - y,
                Binary::Mul => |x: f64, y: f64| x * y,
            };
            let (da, db) = (ta.data(), tb.data());
            let out: Vec<f64> = match (&a_map, &b_map) {
                (None, None) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
                _ => (0..len)
                    .map(|i| {
                        let ia = a_map.as_ref().map_or(i, |m| m[i]);
                        let ib = b_map.as_ref().map_or(i, |m| m[i]);
                        f(da[ia], db[ib])
                    })
                    .collect(),
            };
            (Tensor::new(out_shape, out)?, a_map, b_map)
        };
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                a_map,
                b_map,
            },
            rg,
        ))
    }

    /// Elementwise sum with same-rank broadcasting over unit extents.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&self, kind: Unary, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if kind == Unary::Log {
                if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
            }
            let f: fn(f64) -> f64 = match kind {
                Unary::Neg => |x| -x,
                Unary::Relu => |x| if x > 0.0 { x } else { 0.0 },
                Unary::Abs => f64::abs,
                Unary::Square => |x| x * x,
                Unary::Exp => f64::exp,
                Unary::Log => f64::ln,
            };
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())?
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(value, Op::Unary { kind, a }, rg))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(Unary::Neg, a).expect("neg is total")
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&self, a: Var) -> Var {
        self.unary(Unary::Relu, a).expect("relu is total")
    }

    /// `|x|`; the subgradient at exactly 0 is 0.
    pub fn abs(&self, a: Var) -> Var {
        self.unary(Unary::Abs, a).expect("abs is total")
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(Unary::Square, a).expect("square is total")
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(Unary::Exp, a).expect("exp is total")
    }

    /// Natural log; fails with a domain error on any non-positive input.
    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    /// `c · a`.
    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = self.with_value(a, |t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| c * x).collect())
                .expect("same shape")
        });
        let rg = self.needs_grad(&[a]);
        self.push(value, Op::Scale { a, c }, rg)
    }

    /// `a + c` for a scalar constant `c`.
    pub fn shift(&self, a: Var, c: f64) -> Var {
        let value = self.with_value(a, |t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x + c).collect())
                .expect("same shape")
        });
        let rg = self.needs_grad(&[a]);
        self.push(value, Op::Shift { a }, rg)
    }

    // ---------------------------------------------------------------- reductions

    fn reduce(&self, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let (value, scale) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            match axis {
                None => {
                    let scale = if mean { 1.0 / t.len() as f64 } else { 1.0 };
                    let s: f64 = t.data().iter().sum();
                    (Tensor::scalar(s * scale), scale)
                }
                Some(ax) => {
                    if ax >= t.rank() {
                        return Err(Error::Axis {
                            op: if mean { "mean" } else { "sum" },
                            axis: ax,
                            rank: t.rank(),
                        });
                    }
                    let (outer, ext, inner) = axis_blocks(t.shape(), ax);
                    let scale = if mean { 1.0 / ext as f64 } else { 1.0 };
                    let mut out = vec![0.0; outer * inner];
                    let d = t.data();
                    for o in 0..outer {
                        for e in 0..ext {
                            let base = (o * ext + e) * inner;
                            for i in 0..inner {
                                out[o * inner + i] += d[base + i];
                            }
                        }
                    }
                    if mean {
                        out.iter_mut().for_each(|v| *v *= scale);
                    }
                    let mut shape = t.shape().to_vec();
                    shape.remove(ax);
                    (Tensor::new(shape, out)?, scale)
                }
            }
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(value, Op::Sum { a, axis, scale }, rg))
    }

    /// Sum over `axis` (removing it), or over everything into a scalar.
    pub fn sum(&self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    /// `log Σ exp` over `axis`, computed with a max shift so large
    /// magnitudes never overflow.
    pub fn logsumexp(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if axis >= t.rank() {
                return Err(Error::Axis {
                    op: "logsumexp",
                    axis,
                    rank: t.rank(),
                });
            }
            if t.data().iter().any(|v| v.is_nan()) {
                return Err(Error::Numeric {
                    op: "logsumexp",
                    detail: "NaN input".into(),
                });
            }
            let (outer, ext, inner) = axis_blocks(t.shape(), axis);
            let d = t.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |e: usize| d[(o * ext + e) * inner + i];
                    let max = (0..ext).map(at).fold(f64::NEG_INFINITY, f64::max);
                    out[o * inner + i] = if max == f64::NEG_INFINITY || max == f64::INFINITY {
                        max
                    } else {
                        let s: f64 = (0..ext).map(|e| (at(e) - max).exp()).sum();
                        max + s.ln()
                    };
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Tensor::new(shape, out)?
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(value, Op::LogSumExp { a, axis }, rg))
    }

    // ---------------------------------------------------------------- shape

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.needs_grad(&[a]);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let rank = t.rank();
            let mut seen = vec![false; rank];
            if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::Dimension {
                    op: "permute",
                    lhs: t.shape().to_vec(),
                    rhs: perm.to_vec(),
                });
            }
            let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
            let src = permute_source_index(t.shape(), perm);
            let d = t.data();
            Tensor::new(out_shape, src.iter().map(|&i| d[i]).collect())?
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// The slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if axis >= t.rank() {
                return Err(Error::Axis {
                    op: "narrow",
                    axis,
                    rank: t.rank(),
                });
            }
            let (outer, ext, inner) = axis_blocks(t.shape(), axis);
            if len == 0 || start + len > ext {
                return Err(Error::Dimension {
                    op: "narrow",
                    lhs: t.shape().to_vec(),
                    rhs: vec![start, len],
                });
            }
            let d = t.data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, out)?
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(value, Op::Narrow { a, axis, start }, rg))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts.first().ok_or_else(|| Error::contract("concat of nothing"))?.0].value;
            if axis >= first.rank() {
                return Err(Error::Axis {
                    op: "concat",
                    axis,
                    rank: first.rank(),
                });
            }
            let mut total = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                let compatible = s.len() == first.rank()
                    && s.iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(i, (x, y))| i == axis || x == y);
                if !compatible {
                    return Err(Error::Dimension {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let (outer, _, inner) = axis_blocks(first.shape(), axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let ext = t.shape()[axis];
                    out.extend_from_slice(&t.data()[o * ext * inner..(o + 1) * ext * inner]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[axis] = total;
            Tensor::new(shape, out)?
        };
        let rg = self.needs_grad(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates `∂loss/∂v` into every reachable node that requires a
    /// gradient. Repeated calls add to existing gradients.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

fn scatter(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, map: &Option<Vec<usize>>, g: &[f64], sign: f64) {
    accumulate(grads, nodes, v, |acc| match map {
        None => acc.iter_mut().zip(g).for_each(|(a, &x)| *a += sign * x),
        Some(m) => m.iter().zip(g).for_each(|(&i, &x)| acc[i] += sign * x),
    });
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            accumulate(grads, nodes, a, |acc| gemm_nt_acc(g, vb, m, k, n, acc));
            accumulate(grads, nodes, b, |acc| gemm_tn_acc(va, g, m, k, n, acc));
        }
        &Op::BatchedMatMul { a, b, g: groups, m, k, n } => {
            let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            accumulate(grads, nodes, a, |acc| {
                for s in 0..groups {
                    gemm_nt_acc(
                        &g[s * m * n..(s + 1) * m * n],
                        &vb[s * k * n..(s + 1) * k * n],
                        m,
                        k,
                        n,
                        &mut acc[s * m * k..(s + 1) * m * k],
                    );
                }
            });
            accumulate(grads, nodes, b, |acc| {
                for s in 0..groups {
                    gemm_tn_acc(
                        &va[s * m * k..(s + 1) * m * k],
                        &g[s * m * n..(s + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut acc[s * k * n..(s + 1) * k * n],
                    );
                }
            });
        }
        Op::Binary {
            kind,
            a,
            b,
            a_map,
            b_map,
        } => match kind {
            Binary::Add => {
                scatter(grads, nodes, *a, a_map, g, 1.0);
                scatter(grads, nodes, *b, b_map, g, 1.0);
            }
            Binary::Sub => {
                scatter(grads, nodes, *a, a_map, g, 1.0);
                scatter(grads, nodes, *b, b_map, g, -1.0);
            }
            Binary::Mul => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let at = |map: &Option<Vec<usize>>, i: usize| map.as_ref().map_or(i, |m| m[i]);
                if nodes[a.0].requires_grad {
                    let ga: Vec<f64> = g.iter().enumerate().map(|(i, &x)| x * vb[at(b_map, i)]).collect();
                    scatter(grads, nodes, *a, a_map, &ga, 1.0);
                }
                if nodes[b.0].requires_grad {
                    let gb: Vec<f64> = g.iter().enumerate().map(|(i, &x)| x * va[at(a_map, i)]).collect();
                    scatter(grads, nodes, *b, b_map, &gb, 1.0);
                }
            }
        },
        &Op::Unary { kind, a } => {
            let x = nodes[a.0].value.data();
            let y = node.value.data();
            accumulate(grads, nodes, a, |acc| {
                for i in 0..acc.len() {
                    let d = match kind {
                        Unary::Neg => -1.0,
                        Unary::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Abs => {
                            if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Square => 2.0 * x[i],
                        Unary::Exp => y[i],
                        Unary::Log => 1.0 / x[i],
                    };
                    acc[i] += g[i] * d;
                }
            });
        }
        &Op::Scale { a, c } => {
            accumulate(grads, nodes, a, |acc| acc.iter_mut().zip(g).for_each(|(a, &x)| *a += c * x));
        }
        &Op::Shift { a } | &Op::Reshape { a } => {
            accumulate(grads, nodes, a, |acc| acc.iter_mut().zip(g).for_each(|(a, &x)| *a += x));
        }
        &Op::Sum { a, axis, scale } => {
            let in_shape = nodes[a.0].value.shape();
            accumulate(grads, nodes, a, |acc| match axis {
                None => acc.iter_mut().for_each(|v| *v += scale * g[0]),
                Some(ax) => {
                    let (outer, ext, inner) = axis_blocks(in_shape, ax);
                    for o in 0..outer {
                        for e in 0..ext {
                            let base = (o * ext + e) * inner;
                            for i in 0..inner {
                                acc[base + i] += scale * g[o * inner + i];
                            }
                        }
                    }
                }
            });
        }
        &Op::LogSumExp { a, axis } => {
            let x = nodes[a.0].value.data();
            let out = node.value.data();
            let (outer, ext, inner) = axis_blocks(nodes[a.0].value.shape(), axis);
            accumulate(grads, nodes, a, |acc| {
                for o in 0..outer {
                    for i in 0..inner {
                        let lse = out[o * inner + i];
                        let go = g[o * inner + i];
                        if !lse.is_finite() {
                            continue;
                        }
                        for e in 0..ext {
                            let idx = (o * ext + e) * inner + i;
                            acc[idx] += go * (x[idx] - lse).exp();
                        }
                    }
                }
            });
        }
        Op::Permute { a, perm } => {
            let src = permute_source_index(nodes[a.0].value.shape(), perm);
            accumulate(grads, nodes, *a, |acc| {
                for (o, &s) in src.iter().enumerate() {
                    acc[s] += g[o];
                }
            });
        }
        &Op::Narrow { a, axis, start } => {
            let (outer, ext, inner) = axis_blocks(nodes[a.0].value.shape(), axis);
            let len = node.value.shape()[axis];
            accumulate(grads, nodes, a, |acc| {
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    for j in 0..len * inner {
                        acc[dst + j] += g[src + j];
                    }
                }
            });
        }
        Op::Concat { parts, axis } => {
            let total = node.value.shape()[*axis];
            let (outer, _, inner) = axis_blocks(node.value.shape(), *axis);
            let mut offset = 0;
            for p in parts {
                let ext = nodes[p.0].value.shape()[*axis];
                accumulate(grads, nodes, *p, |acc| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * ext * inner;
                        for j in 0..ext * inner {
                            acc[dst + j] += g[src + j];
                        }
                    }
                });
                offset += ext;
            }
        }
    }
}

/// For each flat output index of a permutation, the flat input index.
fn permute_source_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        in_strides[ax] = in_strides[ax + 1] * shape[ax + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        out.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}
