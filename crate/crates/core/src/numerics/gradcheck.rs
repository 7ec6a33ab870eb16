use super::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is (numerically) zero are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-3;

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords: usize,
}

/// Compares the analytic gradient of a scalar function against central
/// differences `(f(x+εe) − f(x−εe)) / 2ε` at every coordinate of `x`.
///
/// `f(x, true)` must return the value and the analytic gradient;
/// `f(x, false)` may skip the gradient. The per-coordinate error is
/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: FnMut(&Tensor, bool) -> Result<(f64, Option<Vec<f64>>)>,
{
    if eps <= 0.0 {
        return Err(Error::Config(
            "finite difference step must be positive".into(),
        ));
    }
    let (f0, grad) = f(x, true)?;
    if !f0.is_finite() {
        return Err(Error::Evaluation(format!("f(x) = {f0}")));
    }
    let grad = grad.ok_or_else(|| Error::Evaluation("no analytic gradient returned".into()))?;
    if grad.len() != x.numel() {
        return Err(Error::dim(format!(
            "gradient has {} entries for {} coordinates",
            grad.len(),
            x.numel()
        )));
    }
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords: x.numel(),
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (fp, _) = f(&probe, false)?;
        probe.data_mut()[i] = orig - eps;
        let (fm, _) = f(&probe, false)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite value while perturbing coordinate {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let analytic = grad[i];
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.max_rel_error || rel.is_nan() {
            report = GradCheck {
                max_rel_error: rel,
                worst_index: i,
                analytic,
                numeric,
                coords: x.numel(),
            };
        }
    }
    Ok(report)
}
