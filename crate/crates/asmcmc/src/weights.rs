//! Log-domain weight arithmetic.
//!
//! Weights are carried as `log w` throughout the crate: products over
//! tempering stages underflow linear-domain doubles long before they become
//! statistically degenerate. Normalisation uses the max-shift (log-sum-exp)
//! form.

use rand::Rng;

use crate::{Error, Result};

/// Max-shifted `log Σ exp(lw_n)`. Returns `-inf` for all-`-inf` input.
pub fn log_sum_exp(lw: &[f64]) -> f64 {
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    max + lw.iter().map(|&w| (w - max).exp()).sum::<f64>().ln()
}

/// Normalise log-domain weights.
///
/// Returns the linear-domain probability vector and `log Σ exp(lw_n)`.
/// Adding a constant to every entry leaves the probabilities unchanged.
pub fn normalize_log_weights(lw: &[f64]) -> Result<(Vec<f64>, f64)> {
    if lw.is_empty() {
        return Err(Error::EmptyInput("log weights"));
    }
    let log_sum = log_sum_exp(lw);
    if log_sum == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    let unnorm: Vec<f64> = lw.iter().map(|&w| (w - log_sum).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok((unnorm.iter().map(|&e| e / total).collect(), log_sum))
}

/// `log((1/N) Σ exp(lw_n))`, max-shifted. Exact for constant vectors.
pub fn log_sum_exp_mean(lw: &[f64]) -> Result<f64> {
    if lw.is_empty() {
        return Err(Error::EmptyInput("log weights"));
    }
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    // For a constant vector every shifted term is exp(0) = 1, so the mean
    // is exactly 1 and the result is exactly `max`.
    Ok(max + (lw.iter().map(|&w| (w - max).exp()).sum::<f64>() / lw.len() as f64).ln())
}

/// Validate that `w` is a probability vector: entries in `[0, 1]` summing to
/// one within `tol`.
pub fn check_normalized(w: &[f64], tol: f64) -> Result<()> {
    if w.is_empty() {
        return Err(Error::EmptyInput("weights"));
    }
    let sum: f64 = w.iter().sum();
    if w.iter().any(|&x| !(0.0..=1.0 + tol).contains(&x)) || (sum - 1.0).abs() > tol {
        return Err(Error::InvalidWeights { sum });
    }
    Ok(())
}

/// Draw one index from a normalised weight vector by CDF inversion.
pub fn sample_categorical<R: Rng + ?Sized>(normalized: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (idx, &w) in normalized.iter().enumerate() {
        acc += w;
        if u < acc {
            return idx;
        }
    }
    normalized.len() - 1
}
