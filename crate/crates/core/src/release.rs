//! Privatized release: per-node Laplace noise at the level's budget, the
//! non-negativity clamp, and top-down consistency projection.

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::BudgetAllocation;
use crate::hierarchy::{self, Hierarchy};
use crate::rng::{node_key, NoiseStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReleaseError {
    #[error("allocation has {alloc} levels but the hierarchy has {depth}")]
    AllocationMismatch { alloc: usize, depth: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("level {0} was not released; consistency needs every level")]
    UnreleasedLevel(usize),
}

/// Inverse-CDF Laplace draw: `sign(u) * scale * ln(1 - 2|u|)` for `u` in `(-1/2, 1/2)`.
#[inline]
pub fn laplace_from_uniform(u: f64, scale: f64) -> f64 {
    if u == 0.0 {
        return 0.0;
    }
    u.signum() * scale * (1.0 - 2.0 * u.abs()).ln()
}

pub fn laplace_sample<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> Result<f64, ReleaseError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(ReleaseError::Domain(format!(
            "Laplace scale must be > 0, got {scale}"
        )));
    }
    Ok(standard_laplace(rng) * scale)
}

#[inline]
fn standard_laplace<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.sample::<f64, _>(Open01) - 0.5;
    laplace_from_uniform(u, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReleaseOptions {
    /// Budget spent on levels whose allocation is zero; `0` leaves them unreleased.
    pub eps_floor: f64,
}

impl Default for ReleaseOptions {
    fn default() -> Self {
        Self { eps_floor: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleaseMetadata {
    pub allocation: BudgetAllocation,
    pub seed: u64,
    pub replicate: u64,
    pub consistency_applied: bool,
    /// Budget actually used per level (the allocation, or the floor where it
    /// was zero); zero marks an unreleased level.
    pub eps_released: Vec<f64>,
    pub eps_spent: f64,
}

/// Noisy counts on the shape of a source hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivatizedHierarchy<'h> {
    source: &'h Hierarchy,
    noisy: Vec<Option<f64>>,
    pub meta: ReleaseMetadata,
}

impl<'h> PrivatizedHierarchy<'h> {
    pub fn source(&self) -> &'h Hierarchy {
        self.source
    }

    /// Released count indexed like [`Hierarchy::nodes`]; `None` when unreleased.
    pub fn noisy_count(&self, index: usize) -> Option<f64> {
        self.noisy[index]
    }

    pub fn noisy_counts(&self) -> &[Option<f64>] {
        &self.noisy
    }

    /// Released counts at 1-based `level`, in node order.
    pub fn level_counts(&self, level: usize) -> Option<Vec<f64>> {
        self.source
            .level_range(level)
            .map(|i| self.noisy[i])
            .collect()
    }

    /// Same CSV schema as the source; unreleased rows are omitted.
    pub fn to_csv(&self) -> String {
        hierarchy::csv_io_write_rows(self.source, |i| self.noisy[i])
    }

    pub fn sidecar_json(&self) -> String {
        serde_json::to_string_pretty(&self.meta).expect("metadata serializes")
    }
}

/// Precomputed per-node stream keys and per-node scales for repeated releases.
pub(crate) struct NoiseEngine<'h> {
    h: &'h Hierarchy,
    keys: Vec<u64>,
    /// `1/eps` of the node's level; zero for unreleased levels.
    scales: Vec<f64>,
}

impl<'h> NoiseEngine<'h> {
    pub(crate) fn new(h: &'h Hierarchy, eps_by_level: &[f64]) -> Self {
        let keys = h.nodes().iter().map(|n| node_key(&n.id)).collect();
        let scales = h
            .nodes()
            .iter()
            .map(|n| {
                let e = eps_by_level[n.level - 1];
                if e > 0.0 {
                    1.0 / e
                } else {
                    0.0
                }
            })
            .collect();
        Self { h, keys, scales }
    }

    /// Clamped noisy counts for one replicate; NaN marks unreleased nodes.
    pub(crate) fn fill(&self, seed: u64, replicate: u64, out: &mut [f64]) {
        for (i, node) in self.h.nodes().iter().enumerate() {
            let scale = self.scales[i];
            out[i] = if scale > 0.0 {
                let mut stream = NoiseStream::new(seed, self.keys[i], replicate);
                (node.count + scale * standard_laplace(&mut stream)).max(0.0)
            } else {
                f64::NAN
            };
        }
    }
}

fn released_eps(
    h: &Hierarchy,
    alloc: &BudgetAllocation,
    options: ReleaseOptions,
) -> Result<Vec<f64>, ReleaseError> {
    if alloc.depth() != h.depth() {
        return Err(ReleaseError::AllocationMismatch {
            alloc: alloc.depth(),
            depth: h.depth(),
        });
    }
    if !(options.eps_floor >= 0.0 && options.eps_floor.is_finite()) {
        return Err(ReleaseError::Domain(format!(
            "eps floor must be >= 0, got {}",
            options.eps_floor
        )));
    }
    alloc
        .eps
        .iter()
        .map(|&e| {
            if !(e >= 0.0 && e.is_finite()) {
                Err(ReleaseError::Domain(format!(
                    "level budget must be >= 0, got {e}"
                )))
            } else if e == 0.0 {
                Ok(options.eps_floor)
            } else {
                Ok(e)
            }
        })
        .collect()
}

/// `max(0, N + Lap(1/eps_l))` at every node, replicate 0.
pub fn release_no_hier<'h>(
    h: &'h Hierarchy,
    alloc: &BudgetAllocation,
    seed: u64,
) -> Result<PrivatizedHierarchy<'h>, ReleaseError> {
    release_replicate(h, alloc, seed, 0, ReleaseOptions::default())
}

/// Like [`release_no_hier`] for an explicit replicate index and options.
///
/// Levels whose allocated budget is zero are released at `options.eps_floor`
/// when it is positive and are otherwise withheld. They are never published
/// without noise.
pub fn release_replicate<'h>(
    h: &'h Hierarchy,
    alloc: &BudgetAllocation,
    seed: u64,
    replicate: u64,
    options: ReleaseOptions,
) -> Result<PrivatizedHierarchy<'h>, ReleaseError> {
    let eps = released_eps(h, alloc, options)?;
    let engine = NoiseEngine::new(h, &eps);
    let mut buf = vec![0.0; h.len()];
    engine.fill(seed, replicate, &mut buf);
    let noisy = buf
        .into_iter()
        .map(|v| (!v.is_nan()).then_some(v))
        .collect();
    Ok(PrivatizedHierarchy {
        source: h,
        noisy,
        meta: ReleaseMetadata {
            allocation: alloc.clone(),
            seed,
            replicate,
            consistency_applied: false,
            eps_spent: eps.iter().sum(),
            eps_released: eps,
        },
    })
}

/// Euclidean projection of `noisy_children` onto `{v >= 0, sum v = target_total}`.
///
/// Inputs may be negative (pre-clamp values are accepted).
pub fn project_children(noisy_children: &[f64], target_total: f64) -> Vec<f64> {
    let mut out = noisy_children.to_vec();
    let mut scratch = Vec::with_capacity(out.len());
    project_in_place(&mut out, target_total, &mut scratch);
    out
}

/// Shift-and-clamp: find `theta` with `sum max(0, y_i - theta) = target` from
/// the sorted values, then apply it.
pub(crate) fn project_in_place(values: &mut [f64], target: f64, scratch: &mut Vec<f64>) {
    if values.is_empty() {
        return;
    }
    let target = target.max(0.0);
    if target == 0.0 {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    scratch.clear();
    scratch.extend_from_slice(values);
    scratch.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = scratch[0] - target;
    for (k, &y) in scratch.iter().enumerate() {
        cumsum += y;
        let t = (cumsum - target) / (k + 1) as f64;
        if y - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    for v in values.iter_mut() {
        *v = (*v - theta).max(0.0);
    }
}

/// Top-down pass over the tree buffer: each parent's children are projected
/// onto the parent's already-adjusted value. The root is left untouched.
pub(crate) fn project_top_down(
    h: &Hierarchy,
    values: &mut [f64],
    scratch: &mut Vec<f64>,
    kids: &mut Vec<f64>,
) {
    for level in 1..h.depth() {
        for p in h.level_range(level) {
            let children = h.children(p);
            kids.clear();
            kids.extend(children.iter().map(|&c| values[c]));
            project_in_place(kids, values[p], scratch);
            for (&c, &v) in children.iter().zip(kids.iter()) {
                values[c] = v;
            }
        }
    }
}

pub fn enforce_consistency<'h>(
    p: &PrivatizedHierarchy<'h>,
) -> Result<PrivatizedHierarchy<'h>, ReleaseError> {
    let h = p.source;
    let mut values = Vec::with_capacity(h.len());
    for (i, v) in p.noisy.iter().enumerate() {
        values.push(v.ok_or(ReleaseError::UnreleasedLevel(h.level_of(i)))?);
    }
    let (mut scratch, mut kids) = (Vec::new(), Vec::new());
    project_top_down(h, &mut values, &mut scratch, &mut kids);
    let mut meta = p.meta.clone();
    meta.consistency_applied = true;
    Ok(PrivatizedHierarchy {
        source: h,
        noisy: values.into_iter().map(Some).collect(),
        meta,
    })
}
