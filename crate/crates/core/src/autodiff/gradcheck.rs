//! Central finite differences, the independent oracle for every backward pass.

use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `at`: `(f(x + eps·eᵢ) - f(x - eps·eᵢ)) / 2eps`.
pub fn finite_diff_gradient<F>(mut f: F, at: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut x = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x)?;
        x[i] = orig - eps;
        let minus = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("f is non-finite around coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Outcome of comparing an analytic gradient against a numeric estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradComparison {
    pub max_abs_error: f64,
    /// Largest `|a - n| / max(|a|, |n|)` over coordinates that failed the absolute floor.
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Coordinate-wise check: `|a - n| <= max(rel_tol * max(|a|, |n|), abs_tol)`.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_tol: f64) -> GradComparison {
    let mut out = GradComparison {
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        passed: analytic.len() == numeric.len(),
    };
    for (&a, &n) in analytic.iter().zip(numeric) {
        let err = (a - n).abs();
        let scale = a.abs().max(n.abs());
        out.max_abs_error = out.max_abs_error.max(err);
        if err > abs_tol {
            out.max_rel_error = out.max_rel_error.max(err / scale);
        }
        if err > (rel_tol * scale).max(abs_tol) || !err.is_finite() {
            out.passed = false;
        }
    }
    out
}
