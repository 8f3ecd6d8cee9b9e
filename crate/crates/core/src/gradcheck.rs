//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass on constant
//! inputs, so it stays independent of the backward rules it verifies.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub rel_tol: f64,
    /// Absolute differences below this always pass.
    pub abs_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-6,
            rel_tol: 1e-5,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// Largest relative error among entries above the absolute floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.failures += other.failures;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` with central finite
/// differences, entry by entry, for every input tensor.
pub fn check_gradient<F>(inputs: &[Tensor], f: F, cfg: GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    drop(tape);

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        tape.item(out)
    };

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[j];
            probe[ti].data_mut()[j] = orig + cfg.step;
            let up = eval(&probe)?;
            probe[ti].data_mut()[j] = orig - cfg.step;
            let down = eval(&probe)?;
            probe[ti].data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = grad.data()[j];
            let abs = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if abs <= cfg.abs_floor {
                continue;
            }
            let rel = abs / a.abs().max(numeric.abs());
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= cfg.rel_tol {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}
