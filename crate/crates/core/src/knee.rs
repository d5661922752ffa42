//! Knee-point detection on a descending logits curve.
//!
//! Sorted logits are mapped to the unit square (rank `i/N` on x, min-max value on y)
//! and the cutoff is the rank furthest below the reference line `r(x) = 1 - x`. The
//! head of the curve up to that rank is the information-rich region used for top-k
//! selection; everything after it is treated as long tail.

use crate::autodiff::sort_descending_indices;
use crate::error::{Error, Result};

/// Default upper bound on the selected `k`.
pub const DEFAULT_K_CAP: usize = 64;

/// Smallest usable cutoff: one pairwise difference needs two logits.
pub const MIN_K: usize = 2;

/// Distances within this much of the maximum count as tied with it. Rounding in the
/// normalization would otherwise break exact ties differently for `z` and `a·z + b`.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCurve {
    /// `x_i = i / N` for `i = 1..=N`.
    pub x: Vec<f64>,
    /// Min-max normalized values, `1` at the head and `0` at the tail.
    pub y: Vec<f64>,
    /// `d_i = (1 - x_i) - y_i`.
    pub d: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KneeResult {
    pub k: usize,
    /// Permutation of `0..N` ordering the input by descending value.
    pub sorted_indices: Vec<usize>,
}

/// Builds the normalized curve for an already sorted (non-increasing) vector.
pub fn normalize_sorted(z_sorted: &[f64]) -> Result<NormalizedCurve> {
    let n = z_sorted.len();
    if n < 2 {
        return Err(Error::Contract(format!("knee detection needs N >= 2, got {n}")));
    }
    if z_sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    if z_sorted.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Contract("input must be sorted non-increasing".into()));
    }
    let (max, min) = (z_sorted[0], z_sorted[n - 1]);
    if max == min {
        return Err(Error::DegenerateDistribution);
    }
    let range = max - min;
    let nf = n as f64;
    let x: Vec<f64> = (1..=n).map(|i| i as f64 / nf).collect();
    let y: Vec<f64> = z_sorted.iter().map(|z| (z - min) / range).collect();
    let d = x.iter().zip(&y).map(|(xi, yi)| (1.0 - xi) - yi).collect();
    Ok(NormalizedCurve { x, y, d })
}

/// Knee cutoff of `z`, clamped to `[2, min(N, k_cap)]`.
///
/// Ties in the maximum distance (up to [`TIE_TOLERANCE`]) resolve to the smallest rank. A constant vector has
/// no knee; it falls back to `k = 2` over the natural index order.
pub fn knee_index(z: &[f64], k_cap: usize) -> Result<KneeResult> {
    let n = z.len();
    if n < MIN_K {
        return Err(Error::Contract(format!("knee detection needs N >= 2, got {n}")));
    }
    if k_cap < MIN_K {
        return Err(Error::Contract(format!("k_cap must be at least 2, got {k_cap}")));
    }
    let sorted_indices = sort_descending_indices(z);
    let sorted: Vec<f64> = sorted_indices.iter().map(|&i| z[i]).collect();
    let curve = match normalize_sorted(&sorted) {
        Ok(curve) => curve,
        Err(Error::DegenerateDistribution) => {
            return Ok(KneeResult {
                k: MIN_K,
                sorted_indices: (0..n).collect(),
            })
        }
        Err(e) => return Err(e),
    };
    let max = curve.d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let best = curve.d.iter().position(|&d| d >= max - TIE_TOLERANCE).unwrap_or(0);
    // `best` is 0-based; the cutoff counts ranks from 1.
    let k = (best + 1).clamp(MIN_K, n.min(k_cap));
    Ok(KneeResult { k, sorted_indices })
}
