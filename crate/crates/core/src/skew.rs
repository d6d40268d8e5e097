//! Clamp bias as a function of how a fixed total is split across regions.
//!
//! The total bias `sum_i exp(-eps N_i) / (2 eps)` is Schur-convex in the
//! split, so it is smallest when the split is balanced and it grows along
//! any chain of reverse Robin Hood transfers.

use serde::Serialize;
use thiserror::Error;

use crate::analytics::{self, AnalyticsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkewError {
    #[error("invalid split {split:?}: {reason}")]
    InvalidSplit { split: Vec<u64>, reason: String },
    #[error("need at least one region")]
    NoRegions,
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

pub fn total_bias(split: &[u64], eps: f64) -> Result<f64, SkewError> {
    split
        .iter()
        .map(|&n| analytics::bias(n as f64, eps).map_err(SkewError::from))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkewPoint {
    pub eps: f64,
    pub split: Vec<u64>,
    pub total_bias: f64,
}

/// Closed-form total bias for every `(eps, split)` pair.
///
/// With `splits == None` every composition of `total` into `regions`
/// nonnegative parts is evaluated.
pub fn skewness_bias_curve(
    total: u64,
    regions: usize,
    eps_grid: &[f64],
    splits: Option<&[Vec<u64>]>,
) -> Result<Vec<SkewPoint>, SkewError> {
    if regions == 0 {
        return Err(SkewError::NoRegions);
    }
    let owned;
    let splits = match splits {
        Some(s) => {
            for split in s {
                validate_split(split, total, regions)?;
            }
            s
        }
        None => {
            owned = compositions(total, regions);
            &owned[..]
        }
    };
    let mut out = Vec::with_capacity(eps_grid.len() * splits.len());
    for &eps in eps_grid {
        for split in splits {
            out.push(SkewPoint {
                eps,
                split: split.clone(),
                total_bias: total_bias(split, eps)?,
            });
        }
    }
    Ok(out)
}

fn validate_split(split: &[u64], total: u64, regions: usize) -> Result<(), SkewError> {
    let bad = |reason: String| {
        Err(SkewError::InvalidSplit {
            split: split.to_vec(),
            reason,
        })
    };
    if split.len() != regions {
        return bad(format!("expected {regions} parts, got {}", split.len()));
    }
    let sum: u64 = split.iter().sum();
    if sum != total {
        return bad(format!("parts sum to {sum}, expected {total}"));
    }
    Ok(())
}

/// All ordered splits of `total` into `parts` nonnegative integers, in
/// lexicographic order.
pub fn compositions(total: u64, parts: usize) -> Vec<Vec<u64>> {
    fn rec(left: u64, parts: usize, cur: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if parts == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for first in 0..=left {
            cur.push(first);
            rec(left - first, parts - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if parts > 0 {
        rec(total, parts, &mut Vec::with_capacity(parts), &mut out);
    }
    out
}

/// Splits of `total` into `parts` nonnegative integers, nonincreasing, so
/// each unordered split appears once.
pub fn partitions(total: u64, parts: usize) -> Vec<Vec<u64>> {
    fn rec(left: u64, parts: usize, cap: u64, cur: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if parts == 1 {
            if left <= cap {
                cur.push(left);
                out.push(cur.clone());
                cur.pop();
            }
            return;
        }
        // the first part must be at least the average of what remains
        let min_first = left.div_ceil(parts as u64);
        for first in (min_first..=cap.min(left)).rev() {
            cur.push(first);
            rec(left - first, parts - 1, first, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if parts > 0 {
        rec(
            total,
            parts,
            total,
            &mut Vec::with_capacity(parts),
            &mut out,
        );
    }
    out
}

/// The integer split whose parts differ by at most one, larger parts first.
pub fn balanced_split(total: u64, parts: usize) -> Vec<u64> {
    let q = total / parts as u64;
    let r = (total % parts as u64) as usize;
    (0..parts).map(|i| q + u64::from(i < r)).collect()
}

/// True when `a` majorizes `b`: equal totals and every prefix of `a` sorted
/// in decreasing order dominates the matching prefix of `b`.
pub fn majorizes(a: &[u64], b: &[u64]) -> bool {
    if a.len() != b.len() || a.iter().sum::<u64>() != b.iter().sum::<u64>() {
        return false;
    }
    let sorted = |x: &[u64]| {
        let mut v = x.to_vec();
        v.sort_unstable_by(|p, q| q.cmp(p));
        v
    };
    let (a, b) = (sorted(a), sorted(b));
    let (mut pa, mut pb) = (0u64, 0u64);
    a.iter().zip(&b).all(|(x, y)| {
        pa += x;
        pb += y;
        pa >= pb
    })
}

/// Chain from `start` to the balanced split, moving `step` units from the
/// largest part to the smallest at each link. Each element majorizes the
/// next.
pub fn transfer_chain(start: &[u64], step: u64) -> Vec<Vec<u64>> {
    let step = step.max(1);
    let mut cur = start.to_vec();
    let mut chain = vec![cur.clone()];
    while let Some((hi, &max)) = cur
        .iter()
        .enumerate()
        .max_by_key(|&(i, v)| (*v, std::cmp::Reverse(i)))
    {
        let (lo, &min) = cur
            .iter()
            .enumerate()
            .min_by_key(|&(i, v)| (*v, i))
            .unwrap();
        if max - min <= 1 {
            break;
        }
        // never overshoot past the midpoint of the two parts
        let moved = step.min((max - min) / 2);
        cur[hi] -= moved;
        cur[lo] += moved;
        chain.push(cur.clone());
    }
    chain
}

pub fn skew_csv(points: &[SkewPoint]) -> String {
    let mut out = String::from("eps,split,total_bias\n");
    for p in points {
        let split: Vec<String> = p.split.iter().map(u64::to_string).collect();
        out.push_str(&format!("{},{},{}\n", p.eps, split.join(";"), p.total_bias));
    }
    out
}
