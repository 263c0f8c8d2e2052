//! Finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::numerics::Matrix;

/// Compares an analytic gradient against central finite differences of `f`
/// around `value`, coordinate by coordinate, and returns the worst relative
/// error. The denominator is clamped at 1 so near-zero gradients are
/// compared absolutely.
///
/// `f` must be a deterministic scalar function of the perturbed value.
pub fn finite_diff_check<F>(
    mut f: F,
    value: &Matrix,
    analytic_grad: &Matrix,
    eps: f64,
) -> Result<f64>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    let mut worst = 0.0f64;
    let mut probe = value.clone();
    for idx in 0..probe.as_slice().len() {
        let orig = probe.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + eps;
        let up = f(&probe)?;
        probe.as_mut_slice()[idx] = orig - eps;
        let down = f(&probe)?;
        probe.as_mut_slice()[idx] = orig;

        let numeric = (up - down) / (2.0 * eps);
        let analytic = analytic_grad.as_slice()[idx];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
