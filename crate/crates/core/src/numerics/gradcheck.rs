use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest relative error over elements with a nonzero true gradient.
    pub max_rel_error: f64,
    /// Largest absolute error over elements whose true gradient is ~0.
    pub max_abs_error_at_zero: f64,
    pub passed: bool,
}

/// Gradients smaller than this on both routes are treated as true zeros and
/// compared with [`ZERO_ABS_TOL`] instead of relatively.
pub const ZERO_GRAD: f64 = 1e-7;
pub const ZERO_ABS_TOL: f64 = 1e-7;

/// Per-element comparison bookkeeping, shared with model-level checks.
#[derive(Debug)]
pub struct ErrorAccumulator {
    tol: f64,
    report: GradCheckReport,
}

impl ErrorAccumulator {
    pub fn new(tol: f64) -> Self {
        ErrorAccumulator {
            tol,
            report: GradCheckReport {
                checked: 0,
                max_rel_error: 0.0,
                max_abs_error_at_zero: 0.0,
                passed: true,
            },
        }
    }

    pub fn push(&mut self, analytic: f64, numeric: f64) {
        let r = &mut self.report;
        r.checked += 1;
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if !diff.is_finite() {
            r.passed = false;
            r.max_rel_error = f64::INFINITY;
            return;
        }
        if scale <= ZERO_GRAD {
            r.max_abs_error_at_zero = r.max_abs_error_at_zero.max(diff);
            if diff > ZERO_ABS_TOL {
                r.passed = false;
            }
        } else {
            let rel = diff / scale;
            r.max_rel_error = r.max_rel_error.max(rel);
            if rel > self.tol {
                r.passed = false;
            }
        }
    }

    pub fn finish(self) -> GradCheckReport {
        self.report
    }
}

/// Checks the gradient of a scalar-valued `f` at `x` against central finite
/// differences with the given step.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let loss = f(&mut tape, xv)?;
        let mut grads = tape.backward(loss)?;
        grads
            .take(xv)
            .unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(probe, false);
        let loss = f(&mut tape, xv)?;
        Ok(tape.value(loss).item())
    };
    let mut acc = ErrorAccumulator::new(tol);
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        acc.push(analytic.data()[i], numeric);
    }
    Ok(acc.finish())
}
