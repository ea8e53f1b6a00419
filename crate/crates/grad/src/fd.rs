//! Central finite-difference gradient checking.
//!
//! The checker perturbs each input coordinate by ±eps, re-evaluates the
//! scalar function, and compares the central difference against the
//! analytic gradient. Coordinates where the two one-sided differences
//! disagree strongly sit at a nondifferentiable point (a max tie, a relu
//! kink); they are skipped and flagged in the report instead of failing.

use crate::tensor::Tensor;
use std::fmt;

/// One checked coordinate.
#[derive(Clone, Debug)]
pub struct FdCoord {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<FdCoord>,
    pub failures: Vec<FdCoord>,
    /// Coordinates skipped as subgradient points (kinks, ties).
    pub skipped: Vec<FdCoord>,
    pub tol: f64,
}

impl FdReport {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for FdReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "finite-diff: {} coords checked, max rel err {:.3e} (tol {:.1e}), {} failed, {} skipped at kinks -> {}",
            self.checked,
            self.max_rel_err,
            self.tol,
            self.failures.len(),
            self.skipped.len(),
            if self.pass() { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FdError {
    #[error("finite-difference step {0} outside [1e-6, 1e-3]")]
    BadEps(f64),
    #[error("non-finite value encountered while perturbing input {input} at index {index}")]
    NonFinite { input: usize, index: usize },
    #[error("analytic gradient shape {analytic:?} does not match input shape {input:?}")]
    ShapeMismatch { analytic: Vec<usize>, input: Vec<usize> },
}

/// Relative error floor: differences below this absolute scale count as
/// matching, which keeps pure round-off noise from failing zero gradients.
const DENOM_FLOOR: f64 = 1e-6;
/// One-sided differences disagreeing by more than this (relative) mark a
/// nondifferentiable point.
const KINK_THRESHOLD: f64 = 0.05;
/// Scale floor for the kink test; keeps round-off from looking like a kink
/// when both one-sided slopes are tiny.
const KINK_FLOOR: f64 = 1e-3;

/// Compares analytic gradients against central finite differences of `f`.
///
/// `f` must be a deterministic scalar function of the inputs. `analytic`
/// holds one gradient tensor per input, shaped like it.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[Tensor]) -> f64,
    inputs: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<FdReport, FdError> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(FdError::BadEps(eps));
    }
    assert!(
        inputs.len() == analytic.len(),
        "{} inputs but {} analytic gradients",
        inputs.len(),
        analytic.len()
    );
    for (i, (x, g)) in inputs.iter().zip(analytic).enumerate() {
        if x.shape() != g.shape() {
            let _ = i;
            return Err(FdError::ShapeMismatch {
                analytic: g.shape().to_vec(),
                input: x.shape().to_vec(),
            });
        }
    }
    let mut work: Vec<Tensor> = inputs.to_vec();
    let base = f(&work);
    if !base.is_finite() {
        return Err(FdError::NonFinite { input: 0, index: 0 });
    }
    let mut report = FdReport {
        tol,
        ..FdReport::default()
    };
    for input in 0..work.len() {
        for index in 0..work[input].len() {
            let orig = work[input].data()[index];
            work[input].data_mut()[index] = orig + eps;
            let plus = f(&work);
            work[input].data_mut()[index] = orig - eps;
            let minus = f(&work);
            work[input].data_mut()[index] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(FdError::NonFinite { input, index });
            }
            let fwd = (plus - base) / eps;
            let bwd = (base - minus) / eps;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[input].data()[index];
            let coord = |rel_err| FdCoord {
                input,
                index,
                analytic: a,
                numeric,
                rel_err,
            };
            if (fwd - bwd).abs() > KINK_THRESHOLD * fwd.abs().max(bwd.abs()).max(KINK_FLOOR) {
                report.skipped.push(coord(f64::NAN));
                continue;
            }
            let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            report.checked += 1;
            if rel_err > report.max_rel_err {
                report.max_rel_err = rel_err;
                report.worst = Some(coord(rel_err));
            }
            if rel_err > tol {
                report.failures.push(coord(rel_err));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{Reduce, Tape};

    #[test]
    fn quadratic_matches_exactly() {
        // f(x) = sum(x^2): analytic gradient 2x.
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let grad = x.map(|v| 2.0 * v);
        let mut f = |inputs: &[Tensor]| inputs[0].data().iter().map(|v| v * v).sum();
        let report = finite_diff_check(&mut f, &[x], &[grad], 1e-4, 1e-6).unwrap();
        assert!(report.pass(), "{report}");
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn tape_gradient_of_composite_function() {
        // f(x) = sum(sigmoid(x) * cos(x))
        let x0 = Tensor::vector(vec![0.3, -0.7, 1.2, 0.05]);
        let run = |t: &Tensor| {
            let tape = Tape::new();
            let x = tape.var(t.clone());
            let y = x.sigmoid().mul(x.cos()).reduce(Reduce::Sum, None);
            let g = tape.backward(y).get(x).unwrap().clone();
            (y.item(), g)
        };
        let (_, analytic) = run(&x0);
        let mut f = |inputs: &[Tensor]| run(&inputs[0]).0;
        let report = finite_diff_check(&mut f, &[x0], &[analytic], 1e-4, 1e-6).unwrap();
        assert!(report.pass(), "{report}");
    }

    #[test]
    fn max_over_tie_is_skipped_and_flagged() {
        // f = max(x) with a tie between the two coordinates: the two
        // one-sided differences disagree, so the coordinates are skipped.
        let x = Tensor::vector(vec![1.0, 1.0]);
        let grad = Tensor::vector(vec![1.0, 0.0]); // first-attaining rule
        let mut f = |inputs: &[Tensor]| {
            inputs[0]
                .data()
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let report = finite_diff_check(&mut f, &[x], &[grad], 1e-4, 1e-6).unwrap();
        assert!(report.pass(), "{report}");
        assert_eq!(report.skipped.len(), 2);
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let x = Tensor::scalar(1.0);
        let g = Tensor::scalar(1.0);
        let mut f = |inputs: &[Tensor]| inputs[0].item();
        assert!(finite_diff_check(&mut f, &[x], &[g], 1e-2, 1e-6).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut f = |inputs: &[Tensor]| 1.0 / inputs[0].item().abs().sqrt() * 0.0 + {
            // ln at a perturbed negative point produces NaN
            inputs[0].item().ln()
        };
        assert!(matches!(
            finite_diff_check(&mut f, &[x], &[g], 1e-4, 1e-6),
            Err(FdError::NonFinite { .. })
        ));
    }
}
