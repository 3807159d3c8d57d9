//! Central finite-difference gradient checking.
//!
//! Relative error per element is `|analytic − numeric| / max(|analytic|,
//! |numeric|, 1e-2)`; the floor keeps near-zero gradients from turning
//! round-off into huge ratios.
//!
//! Coordinates where the function has a kink (a max-pool tie, a ReLU at
//! zero) have no derivative. A coordinate is skipped when its forward and
//! backward one-sided differences disagree by more than
//! `1e-2·max(|d+|, |d−|) + 1e-4`; skips are counted in the report.

use std::fmt;

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub per_input: Vec<InputReport>,
    pub tolerance: f64,
    /// Set when the function produced a non-finite value or gradient.
    pub failure: Option<String>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.per_input.iter().all(|r| r.max_rel_error < self.tolerance)
    }

    pub fn skipped(&self) -> usize {
        self.per_input.iter().map(|r| r.skipped).sum()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(msg) = &self.failure {
            return write!(f, "FAILED ({msg})");
        }
        write!(
            f,
            "{} max rel err {:.3e} (tol {:.0e}, {} skipped)",
            if self.passed() { "ok" } else { "FAILED" },
            self.max_rel_error(),
            self.tolerance,
            self.skipped()
        )
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(crate::error::contract_err!("gradcheck function must return a scalar, got {:?}", v.shape()));
    }
    Ok(v.data()[0])
}

/// Compares the tape's gradients of the scalar `f(inputs)` against central
/// differences with step `step`, element by element.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], step: f64, tolerance: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).data().first().copied().unwrap_or(f64::NAN);
    tape.backward(out)?;
    let mut report = GradcheckReport { per_input: Vec::new(), tolerance, failure: None };
    if !f0.is_finite() {
        report.failure = Some(format!("function value is {f0}"));
        return Ok(report);
    }

    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        let analytic = tape.grad(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut rep = InputReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
        for k in 0..inputs[i].numel() {
            let x = inputs[i].data()[k];
            probe[i].data_mut()[k] = x + step;
            let fp = evaluate(&f, &probe)?;
            probe[i].data_mut()[k] = x - step;
            let fm = evaluate(&f, &probe)?;
            probe[i].data_mut()[k] = x;
            if !(fp.is_finite() && fm.is_finite() && analytic[k].is_finite()) {
                report.failure = Some(format!("non-finite value at input {i} element {k}"));
                return Ok(report);
            }
            let (dp, dm) = ((fp - f0) / step, (f0 - fm) / step);
            if (dp - dm).abs() > 1e-2 * dp.abs().max(dm.abs()) + 1e-4 {
                rep.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            rep.max_rel_error = rep.max_rel_error.max(rel);
            rep.checked += 1;
        }
        report.per_input.push(rep);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        // dyadic step and small integers keep x ± h and the sums exact
        let x = Tensor::new([4], vec![1.0, -2.0, 3.0, 0.0]).unwrap();
        let r = gradcheck(|t, v| Ok(t.sum(v[0])), &[x], 2f64.powi(-16), 1e-4).unwrap();
        assert!(r.passed());
        assert_eq!(r.max_rel_error(), 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // x · detach(x): the tape sees derivative x, the true one is 2x
        let x = Tensor::new([3], vec![0.5, 1.5, 2.0]).unwrap();
        let r = gradcheck(
            |t, v| {
                let d = t.detach(v[0]);
                let y = t.mul(v[0], d)?;
                Ok(t.sum(y))
            },
            &[x],
            DEFAULT_STEP,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn max_pool_tie_is_skipped() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 1.0, 0.0, -1.0]).unwrap();
        let r = gradcheck(
            |t, v| {
                let p = t.adaptive_max_pool(v[0], 1, 1)?;
                Ok(t.sum(p))
            },
            &[x],
            DEFAULT_STEP,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(r.passed());
        assert_eq!(r.skipped(), 2);
    }

    #[test]
    fn non_finite_output_fails_loudly() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let r = gradcheck(
            |t, v| {
                let s = t.sum(v[0]);
                Ok(t.scale(s, f64::INFINITY))
            },
            &[x],
            DEFAULT_STEP,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(!r.passed());
        assert!(r.failure.is_some());
    }
}
