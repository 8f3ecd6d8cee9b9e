//! Per-example log-likelihoods and the Monte-Carlo predictive loss.
//!
//! Log-likelihood tensors are laid out `[L, B]`: one row per θ sample, one
//! column per example. The SSE-L2 objective is per sample only and yields
//! `[L, 1]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::primary::{Grouping, ThetaBatch};
use crate::tensor::Tensor;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Likelihood {
    /// Independent Gaussian noise with known σ on every output dimension.
    Gaussian { sigma: f64 },
    /// `−|y − ŷ|`, a pseudo-log-likelihood.
    L1,
    /// `−Σ(y − ŷ)² − λ‖θ‖²` per θ sample.
    SseL2 { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `−mean exp(log_lik)`.
    MeanProb,
    /// `log L − logsumexp_l log_lik`, averaged over examples.
    #[default]
    NegLogMeanProb,
}

impl Likelihood {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Likelihood::Gaussian { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::contract(format!("Gaussian σ must be positive, got {sigma}")))
            }
            Likelihood::SseL2 { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => {
                Err(Error::contract(format!("L2 weight λ must be non-negative, got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    /// Log-likelihoods of targets `y: [B, o]` under predictions
    /// `pred: [L, B, o]` produced from `theta`.
    pub fn mc_log_liks(&self, tape: &Tape, pred: Var, y: &Tensor, theta: &ThetaBatch) -> Result<Var> {
        let ps = tape.shape(pred);
        if ps.len() != 3 || y.rank() != 2 || ps[1..] != *y.shape() {
            return Err(Error::Dimension {
                op: "log_lik",
                lhs: ps,
                rhs: y.shape().to_vec(),
            });
        }
        let y = tape.constant(y.clone().reshape([1, ps[1], ps[2]])?);
        match *self {
            Likelihood::Gaussian { sigma } => gaussian_log_lik(tape, y, pred, sigma),
            Likelihood::L1 => l1_log_lik(tape, y, pred),
            Likelihood::SseL2 { lambda } => sse_l2_log_lik(tape, y, pred, theta, lambda),
        }
    }
}

fn check_same_rank(tape: &Tape, op: &'static str, y: Var, yhat: Var) -> Result<usize> {
    let (a, b) = (tape.shape(y), tape.shape(yhat));
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension { op, lhs: a, rhs: b });
    }
    Ok(a.len() - 1)
}

/// `Σ_o [−ln σ − ½ ln 2π − (y−ŷ)²/(2σ²)]`, reducing the last axis.
pub fn gaussian_log_lik(tape: &Tape, y: Var, yhat: Var, sigma: f64) -> Result<Var> {
    Likelihood::Gaussian { sigma }.validate()?;
    let last = check_same_rank(tape, "gaussian_log_lik", y, yhat)?;
    let r2 = tape.square(tape.sub(y, yhat)?);
    let per = tape.shift(tape.scale(r2, -0.5 / (sigma * sigma)), -sigma.ln() - HALF_LN_2PI);
    tape.sum(per, Some(last))
}

/// `−Σ_o |y − ŷ|`, reducing the last axis.
pub fn l1_log_lik(tape: &Tape, y: Var, yhat: Var) -> Result<Var> {
    let last = check_same_rank(tape, "l1_log_lik", y, yhat)?;
    let a = tape.abs(tape.sub(y, yhat)?);
    Ok(tape.neg(tape.sum(a, Some(last))?))
}

/// `−Σ_b Σ_o (y − ŷ)² − λ θᵀθ` for each of the L samples, shape `[L, 1]`.
///
/// `yhat` is `[L, B, o]`. With per-example θ the penalty sums over the B
/// vectors that share a sample index.
pub fn sse_l2_log_lik(tape: &Tape, y: Var, yhat: Var, theta: &ThetaBatch, lambda: f64) -> Result<Var> {
    Likelihood::SseL2 { lambda }.validate()?;
    check_same_rank(tape, "sse_l2_log_lik", y, yhat)?;
    let ps = tape.shape(yhat);
    if ps.len() != 3 {
        return Err(Error::contract("sse_l2_log_lik expects predictions [L, B, o]"));
    }
    let l = ps[0];
    if theta.grouping.samples() != l {
        return Err(Error::contract(format!(
            "{} θ samples for {l} prediction rows",
            theta.grouping.samples()
        )));
    }
    let r2 = tape.square(tape.sub(y, yhat)?);
    let sse = tape.sum(tape.sum(r2, Some(2))?, Some(1))?;
    let sq = tape.sum(tape.square(theta.values), Some(1))?;
    let norm = match theta.grouping {
        Grouping::Shared { .. } => sq,
        Grouping::PerExample { batch, samples } => tape.sum(tape.reshape(sq, [batch, samples])?, Some(0))?,
    };
    let ll = tape.neg(tape.add(sse, tape.scale(norm, lambda))?);
    tape.reshape(ll, [l, 1])
}

/// Monte-Carlo estimate of the negative posterior predictive from
/// log-likelihoods `[L, B]`.
pub fn mc_predictive_loss(tape: &Tape, log_liks: Var, mode: LossMode) -> Result<Var> {
    let s = tape.shape(log_liks);
    if s.len() != 2 {
        return Err(Error::contract(format!("log-likelihoods must be [L, B], got {s:?}")));
    }
    let l = s[0] as f64;
    match mode {
        LossMode::MeanProb => Ok(tape.neg(tape.mean(tape.exp(log_liks), None)?)),
        LossMode::NegLogMeanProb => {
            let lse = tape.logsumexp(log_liks, 0)?;
            Ok(tape.shift(tape.neg(tape.mean(lse, None)?), l.ln()))
        }
    }
}
