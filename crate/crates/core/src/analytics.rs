//! Closed-form moments of the clamped Laplace release `max(0, N + Lap(1/eps))`.
//!
//! Sensitivity is fixed at 1, so the Laplace scale is `1/eps`. Every formula is
//! written in terms of `x = N * eps`; once `x` exceeds ~745 the exponentials
//! underflow to zero and the results settle on their asymptotes (zero bias,
//! `2/eps^2` variance) instead of producing NaN.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::LevelStats;

/// Smallest budget accepted by any formula here.
pub const MIN_EPS: f64 = 1e-12;

/// Below this `x = N * eps` the cancelling forms switch to Taylor series.
const SERIES_CUTOFF: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("length mismatch: {stats} levels of counts, {weights} weights, {eps} budgets")]
    LengthMismatch {
        stats: usize,
        weights: usize,
        eps: usize,
    },
}

/// Privacy budget for a single counting query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    epsilon: f64,
}

impl NoiseParams {
    pub fn new(epsilon: f64) -> Result<Self, AnalyticsError> {
        check_eps(epsilon)?;
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Laplace scale `1/eps`.
    pub fn scale(&self) -> f64 {
        1.0 / self.epsilon
    }
}

/// Nonnegative per-level weights with at least one positive entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LevelWeights(Vec<f64>);

impl LevelWeights {
    pub fn new(w: Vec<f64>) -> Result<Self, AnalyticsError> {
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(AnalyticsError::Domain(format!(
                "weights must be finite and >= 0: {w:?}"
            )));
        }
        if !w.iter().any(|&x| x > 0.0) {
            return Err(AnalyticsError::Domain(
                "at least one weight must be positive".into(),
            ));
        }
        Ok(Self(w))
    }

    pub fn equal(levels: usize) -> Self {
        Self(vec![1.0; levels])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_eps(eps: f64) -> Result<(), AnalyticsError> {
    if eps.is_finite() && eps >= MIN_EPS {
        Ok(())
    } else {
        Err(AnalyticsError::Domain(format!(
            "eps must be finite and >= {MIN_EPS}, got {eps}"
        )))
    }
}

fn check(n: f64, eps: f64) -> Result<(), AnalyticsError> {
    if !(n.is_finite() && n >= 0.0) {
        return Err(AnalyticsError::Domain(format!(
            "N must be finite and >= 0, got {n}"
        )));
    }
    check_eps(eps)
}

/// `1 - (1 + x) e^{-x}`, accurate near zero.
fn one_minus_tail(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        // sum_{m>=2} (-1)^m (m-1) x^m / m!
        let mut term = x * x / 2.0; // x^m / m!
        let mut sum = 0.0;
        let mut sign = 1.0;
        for m in 2..30 {
            sum += sign * (m - 1) as f64 * term;
            term *= x / (m + 1) as f64;
            sign = -sign;
        }
        sum
    } else {
        1.0 - (1.0 + x) * (-x).exp()
    }
}

/// `2 - (x^2 + 2x + 2) e^{-x}`, accurate near zero.
fn marginal_gap(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        // sum_{m>=3} (-1)^{m+1} (m-1)(m-2) x^m / m!
        let mut term = x * x * x / 6.0;
        let mut sum = 0.0;
        let mut sign = 1.0;
        for m in 3..32 {
            sum += sign * ((m - 1) * (m - 2)) as f64 * term;
            term *= x / (m + 1) as f64;
            sign = -sign;
        }
        sum
    } else {
        2.0 - (x * x + 2.0 * x + 2.0) * (-x).exp()
    }
}

/// `E[max(0, N + Lap(1/eps))] - N = e^{-N eps} / (2 eps)`.
pub fn bias(n: f64, eps: f64) -> Result<f64, AnalyticsError> {
    check(n, eps)?;
    Ok((-n * eps).exp() / (2.0 * eps))
}

pub fn variance(n: f64, eps: f64) -> Result<f64, AnalyticsError> {
    check(n, eps)?;
    let e = (-n * eps).exp();
    Ok((2.0 - e) / (eps * eps) - n / eps * e - e * e / (4.0 * eps * eps))
}

/// `(2 - e^{-eps N}) / eps^2 - (N / eps) e^{-eps N}`, lying in `[1/eps^2, 2/eps^2)`.
pub fn mse(n: f64, eps: f64) -> Result<f64, AnalyticsError> {
    check(n, eps)?;
    Ok(mse_unchecked(n, eps))
}

#[inline]
pub(crate) fn mse_unchecked(n: f64, eps: f64) -> f64 {
    (1.0 + one_minus_tail(n * eps)) / (eps * eps)
}

/// `2/eps^2 - mse(N, eps) = (1 + N eps) e^{-N eps} / eps^2`.
///
/// Positive wherever the exponential is representable; `mse` itself rounds
/// onto `2/eps^2` once `N eps` passes ~37.
pub fn mse_upper_gap(n: f64, eps: f64) -> Result<f64, AnalyticsError> {
    check(n, eps)?;
    let x = n * eps;
    Ok((1.0 + x) * (-x).exp() / (eps * eps))
}

/// `ln(2/eps^2 - mse)`, finite for every valid input, so the strict upper
/// bound stays checkable after the gap itself underflows (`N eps > ~745`).
pub fn ln_mse_upper_gap(n: f64, eps: f64) -> Result<f64, AnalyticsError> {
    check(n, eps)?;
    let x = n * eps;
    Ok(x.ln_1p() - x - 2.0 * eps.ln())
}

/// `d mse / d eps = (N^2 eps^2 e + 2 N eps e + 2 e - 4) / eps^3` with `e = e^{-eps N}`.
/// Lies in `[-4/eps^3, -2/eps^3]`.
pub fn mse_deps(n: f64, eps: f64) -> Result<f64, AnalyticsError> {
    check(n, eps)?;
    Ok(mse_deps_unchecked(n, eps))
}

#[inline]
pub(crate) fn mse_deps_unchecked(n: f64, eps: f64) -> f64 {
    -(2.0 + marginal_gap(n * eps)) / (eps * eps * eps)
}

/// `d^2 mse / d eps^2 = (12 - e (x^3 + 3x^2 + 6x + 6)) / eps^4`, strictly positive.
pub fn mse_d2eps(n: f64, eps: f64) -> Result<f64, AnalyticsError> {
    check(n, eps)?;
    Ok(mse_d2eps_unchecked(n, eps))
}

#[inline]
pub(crate) fn mse_d2eps_unchecked(n: f64, eps: f64) -> f64 {
    let x = n * eps;
    let e = (-x).exp();
    let numer = 12.0 - e * (((x + 3.0) * x + 6.0) * x + 6.0);
    numer / (eps * eps * eps * eps)
}

/// Unweighted MSE of one level's counts at budget `eps`.
pub fn level_mse(counts: &[f64], eps: f64) -> Result<f64, AnalyticsError> {
    check_eps(eps)?;
    counts.iter().map(|&n| mse(n, eps)).sum()
}

/// Per-level unweighted MSE at `eps_vec`. Levels with `eps == 0` report
/// `None` (they are not released).
pub fn level_mse_breakdown(
    stats: &LevelStats,
    eps_vec: &[f64],
) -> Result<Vec<Option<f64>>, AnalyticsError> {
    if stats.depth() != eps_vec.len() {
        return Err(AnalyticsError::LengthMismatch {
            stats: stats.depth(),
            weights: eps_vec.len(),
            eps: eps_vec.len(),
        });
    }
    stats
        .levels()
        .iter()
        .zip(eps_vec)
        .map(|(counts, &eps)| {
            if eps == 0.0 {
                Ok(None)
            } else {
                level_mse(counts, eps).map(Some)
            }
        })
        .collect()
}

/// `sum_l w_l sum_{j in R_l} mse(N_j, eps_l)`. Zero-weight levels contribute
/// nothing and may carry `eps_l = 0`.
pub fn weighted_total_mse(
    stats: &LevelStats,
    w: &LevelWeights,
    eps_vec: &[f64],
) -> Result<f64, AnalyticsError> {
    if stats.depth() != w.len() || w.len() != eps_vec.len() {
        return Err(AnalyticsError::LengthMismatch {
            stats: stats.depth(),
            weights: w.len(),
            eps: eps_vec.len(),
        });
    }
    let mut total = 0.0;
    for ((counts, &wl), &eps) in stats.levels().iter().zip(w.as_slice()).zip(eps_vec) {
        if wl == 0.0 {
            continue;
        }
        total += wl * level_mse(counts, eps)?;
    }
    Ok(total)
}
