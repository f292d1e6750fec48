//! Central-difference gradient oracle shared by every analytic-gradient test.

use crate::error::{Error, Result};

/// Default central-difference step for 64-bit evaluations.
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Central-difference estimate of `∇f(point)`, one coordinate at a time.
pub fn finite_difference_gradient<F>(mut f: F, point: &[f64], epsilon: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Contract(format!(
            "finite-difference step must be positive, got {epsilon}"
        )));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let original = x[i];
        x[i] = original + epsilon;
        let plus = f(&x)?;
        x[i] = original - epsilon;
        let minus = f(&x)?;
        x[i] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i} perturbed by ±{epsilon}: f+ = {plus}, f- = {minus}"
            )));
        }
        grad.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error: length mismatch");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}
