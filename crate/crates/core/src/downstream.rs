//! Budget shares driven by privatized group counts.
//!
//! Groups are the leaves of a (usually two-level) hierarchy. Noisy leaf
//! counts become proportions, a weight function turns proportions into
//! shares of a fixed budget, and misallocation is the share error against
//! the shares computed from true counts, in percentage points.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{allocate_fixed_budget, uniform_allocation, AllocError, BudgetAllocation};
use crate::analytics::LevelWeights;
use crate::hierarchy::{level_stats, HierNode, Hierarchy, HierarchyError, LevelStats};
use crate::release::{project_top_down, NoiseEngine};

pub const MIN_REPLICATES: usize = 1000;
const CHUNK: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DownstreamError {
    #[error("group counts sum to zero")]
    ZeroTotal,
    #[error("every group has zero weight")]
    DegenerateWeights,
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("need at least {min} replicates, got {got}")]
    TooFewReplicates { min: usize, got: usize },
    #[error("privatized output has {got} groups, expected {expected}")]
    GroupMismatch { expected: usize, got: usize },
    #[error("unknown weight function {0:?} (expected log, linear or quadratic)")]
    UnknownWeightFunction(String),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightFunction {
    /// `ln(p + 1)`, concave; flattens group differences.
    Log,
    Linear,
    /// `p^2`, convex; favours large groups.
    Quadratic,
}

impl WeightFunction {
    pub const ALL: [WeightFunction; 3] = [Self::Log, Self::Linear, Self::Quadratic];

    pub fn apply(self, p: f64) -> f64 {
        match self {
            Self::Log => p.ln_1p(),
            Self::Linear => p,
            Self::Quadratic => p * p,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Log => "log",
            Self::Linear => "linear",
            Self::Quadratic => "quadratic",
        }
    }
}

impl fmt::Display for WeightFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightFunction {
    type Err = DownstreamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "log" => Ok(Self::Log),
            "linear" => Ok(Self::Linear),
            "quadratic" => Ok(Self::Quadratic),
            other => Err(DownstreamError::UnknownWeightFunction(other.to_string())),
        }
    }
}

pub fn proportions(counts: &[f64]) -> Result<Vec<f64>, DownstreamError> {
    if let Some(c) = counts.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
        return Err(DownstreamError::InvalidCounts(format!(
            "count {c} is not a nonnegative number"
        )));
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(DownstreamError::ZeroTotal);
    }
    Ok(counts.iter().map(|c| c / total).collect())
}

/// Nonnegative shares summing to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ShareVector(Vec<f64>);

impl ShareVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Shares scaled to an absolute budget.
    pub fn amounts(&self, budget: f64) -> Vec<f64> {
        self.0.iter().map(|s| s * budget).collect()
    }
}

pub fn weighted_shares(counts: &[f64], w: WeightFunction) -> Result<ShareVector, DownstreamError> {
    let mut v = proportions(counts)?;
    if w == WeightFunction::Linear {
        return Ok(ShareVector(v));
    }
    v.iter_mut().for_each(|p| *p = w.apply(*p));
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        return Err(DownstreamError::DegenerateWeights);
    }
    v.iter_mut().for_each(|x| *x /= total);
    Ok(ShareVector(v))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupError {
    pub mean_pct: f64,
    pub variance_pct: f64,
}

/// Misallocation moments in squared percentage points, summed over groups.
///
/// `bias_sq_pct` is the unbiased estimator `sum_i (mean_i^2 - s_i^2 / R)` so
/// that `bias_sq_pct + variance_pct == mse_pct`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MisallocationStats {
    pub weight_fn: WeightFunction,
    pub replicates: usize,
    pub excluded_replicates: usize,
    pub bias_sq_pct: f64,
    pub variance_pct: f64,
    pub mse_pct: f64,
    pub bias_sq_se: f64,
    pub variance_se: f64,
    pub mse_se: f64,
    pub per_group: Vec<GroupError>,
    /// `sum_i (mean W(P~_i) - W(mean P~_i))` over noisy proportions.
    pub jensen_gap: f64,
    #[serde(skip)]
    per_replicate_sq: Vec<Option<f64>>,
}

struct Sample {
    errors: Vec<f64>,
    noisy_props: Vec<f64>,
}

fn sd(xs: &[f64], mean: f64) -> f64 {
    let n = xs.len() as f64;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Misallocation of `w`-weighted shares when `privatize(seed, replicate)`
/// supplies the group counts.
///
/// Replicates whose noisy counts are all zero, or whose weights all vanish,
/// are excluded and counted.
pub fn misallocation_stats<F>(
    true_counts: &[f64],
    privatize: F,
    w: WeightFunction,
    replicates: usize,
    seed: u64,
) -> Result<MisallocationStats, DownstreamError>
where
    F: Fn(u64, u64) -> Vec<f64> + Sync,
{
    if replicates < MIN_REPLICATES {
        return Err(DownstreamError::TooFewReplicates {
            min: MIN_REPLICATES,
            got: replicates,
        });
    }
    let truth = weighted_shares(true_counts, w)?.into_vec();
    let groups = truth.len();

    let chunks: Vec<_> = (0..replicates).step_by(CHUNK).collect();
    let samples: Vec<Result<Option<Sample>, DownstreamError>> = chunks
        .into_par_iter()
        .flat_map_iter(|start| {
            let truth = &truth;
            let privatize = &privatize;
            (start..(start + CHUNK).min(replicates)).map(move |r| {
                let noisy = privatize(seed, r as u64);
                if noisy.len() != groups {
                    return Err(DownstreamError::GroupMismatch {
                        expected: groups,
                        got: noisy.len(),
                    });
                }
                match weighted_shares(&noisy, w) {
                    Ok(s) => Ok(Some(Sample {
                        errors: s
                            .as_slice()
                            .iter()
                            .zip(truth)
                            .map(|(a, b)| 100.0 * (a - b))
                            .collect(),
                        noisy_props: proportions(&noisy)?,
                    })),
                    Err(DownstreamError::ZeroTotal | DownstreamError::DegenerateWeights) => {
                        Ok(None)
                    }
                    Err(e) => Err(e),
                }
            })
        })
        .collect();
    let samples: Vec<Option<Sample>> = samples.into_iter().collect::<Result<_, _>>()?;
    let used: Vec<&Sample> = samples.iter().flatten().collect();
    let excluded_replicates = replicates - used.len();
    if used.len() < 2 {
        return Err(DownstreamError::DegenerateWeights);
    }

    let r = used.len() as f64;
    let mut mean = vec![0.0; groups];
    let mut mean_p = vec![0.0; groups];
    let mut mean_wp = vec![0.0; groups];
    for s in &used {
        for i in 0..groups {
            mean[i] += s.errors[i] / r;
            mean_p[i] += s.noisy_props[i] / r;
            mean_wp[i] += w.apply(s.noisy_props[i]) / r;
        }
    }
    let mut var = vec![0.0; groups];
    for s in &used {
        for i in 0..groups {
            let d = s.errors[i] - mean[i];
            var[i] += d * d / (r - 1.0);
        }
    }

    let influence =
        |f: &dyn Fn(&Sample) -> f64| -> Vec<f64> { used.iter().map(|s| f(s)).collect() };
    let sq = influence(&|s| s.errors.iter().map(|e| e * e).sum());
    let b = influence(&|s| {
        (0..groups)
            .map(|i| 2.0 * mean[i] * (s.errors[i] - mean[i]))
            .sum()
    });
    let v = influence(&|s| {
        (0..groups)
            .map(|i| (s.errors[i] - mean[i]).powi(2))
            .sum::<f64>()
            * r
            / (r - 1.0)
    });
    let mse_pct = sq.iter().sum::<f64>() / r;
    let variance_pct: f64 = var.iter().sum();
    let second: f64 = var.iter().map(|x| 2.0 * x * x).sum::<f64>() / (r * (r - 1.0));

    let mut per_replicate_sq = Vec::with_capacity(replicates);
    let mut it = sq.iter();
    for s in &samples {
        per_replicate_sq.push(s.as_ref().map(|_| *it.next().unwrap()));
    }

    Ok(MisallocationStats {
        weight_fn: w,
        replicates,
        excluded_replicates,
        bias_sq_pct: (0..groups).map(|i| mean[i] * mean[i] - var[i] / r).sum(),
        variance_pct,
        mse_pct,
        bias_sq_se: (sd(&b, 0.0).powi(2) / r + second).sqrt(),
        variance_se: sd(&v, variance_pct) / r.sqrt(),
        mse_se: sd(&sq, mse_pct) / r.sqrt(),
        per_group: mean
            .iter()
            .zip(&var)
            .map(|(&mean_pct, &variance_pct)| GroupError {
                mean_pct,
                variance_pct,
            })
            .collect(),
        jensen_gap: (0..groups).map(|i| mean_wp[i] - w.apply(mean_p[i])).sum(),
        per_replicate_sq,
    })
}

/// Mean and standard error of `a - b` in per-replicate squared error, over
/// replicates both runs kept. Meaningful when both used the same noise.
pub fn paired_mse_difference(a: &MisallocationStats, b: &MisallocationStats) -> Option<(f64, f64)> {
    let d: Vec<f64> = a
        .per_replicate_sq
        .iter()
        .zip(&b.per_replicate_sq)
        .filter_map(|(x, y)| Some((*x)? - (*y)?))
        .collect();
    if d.len() < 2 {
        return None;
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    Some((mean, sd(&d, mean) / (d.len() as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Optimal,
    Uniform,
}

impl Arm {
    pub const ALL: [Arm; 2] = [Arm::Optimal, Arm::Uniform];
}

/// A tract whose leaves are the groups.
///
/// Every arm runs the same three steps: allocate the budget across levels,
/// release with top-down consistency, then read leaf counts. Only the
/// allocation step differs between arms.
#[derive(Debug, Clone)]
pub struct DownstreamRecipe {
    pub hierarchy: Hierarchy,
    pub eps_total: f64,
    pub weights: LevelWeights,
    /// Counts used to choose the budget; the hierarchy itself when `None`.
    pub prior: Option<LevelStats>,
}

impl DownstreamRecipe {
    pub fn new(hierarchy: Hierarchy, eps_total: f64) -> Self {
        let weights = LevelWeights::equal(hierarchy.depth());
        Self {
            hierarchy,
            eps_total,
            weights,
            prior: None,
        }
    }

    pub fn true_counts(&self) -> Vec<f64> {
        let leaves = self.hierarchy.level_range(self.hierarchy.depth());
        self.hierarchy.nodes()[leaves]
            .iter()
            .map(|n| n.count)
            .collect()
    }

    pub fn allocation(&self, arm: Arm) -> Result<BudgetAllocation, DownstreamError> {
        let stats = match &self.prior {
            Some(p) => p.clone(),
            None => level_stats(&self.hierarchy),
        };
        Ok(match arm {
            Arm::Optimal => allocate_fixed_budget(&stats, &self.weights, self.eps_total)?,
            Arm::Uniform => uniform_allocation(self.hierarchy.depth(), self.eps_total)?
                .with_objective(&stats, &self.weights)?,
        })
    }

    /// Noisy, consistent leaf counts for each `(seed, replicate)`.
    ///
    /// A node on a level without budget (a zero-weight level) takes the sum
    /// of its children, so the projection leaves that subtree alone; an
    /// unreleased leaf level reads as zero.
    pub fn privatizer(
        &self,
        alloc: &BudgetAllocation,
    ) -> impl Fn(u64, u64) -> Vec<f64> + Sync + '_ {
        let engine = NoiseEngine::new(&self.hierarchy, &alloc.eps);
        let leaves = self.hierarchy.level_range(self.hierarchy.depth());
        move |seed, replicate| {
            let h = &self.hierarchy;
            let mut values = vec![0.0; h.len()];
            engine.fill(seed, replicate, &mut values);
            for i in (0..h.len()).rev() {
                if values[i].is_nan() {
                    values[i] = h.children(i).iter().map(|&c| values[c]).sum();
                }
            }
            project_top_down(h, &mut values, &mut Vec::new(), &mut Vec::new());
            values[leaves.clone()].to_vec()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DownstreamRow {
    pub weight_fn: WeightFunction,
    pub arm: Arm,
    pub stats: MisallocationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmGap {
    pub weight_fn: WeightFunction,
    /// uniform minus optimal misallocation MSE, paired over replicates.
    pub mse_gap: f64,
    pub mse_gap_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DownstreamReport {
    pub eps_total: f64,
    pub seed: u64,
    pub replicates: usize,
    pub true_counts: Vec<f64>,
    pub optimal: BudgetAllocation,
    pub uniform: BudgetAllocation,
    pub rows: Vec<DownstreamRow>,
    pub gaps: Vec<ArmGap>,
}

impl DownstreamReport {
    pub fn row(&self, w: WeightFunction, arm: Arm) -> Option<&MisallocationStats> {
        self.rows
            .iter()
            .find(|r| r.weight_fn == w && r.arm == arm)
            .map(|r| &r.stats)
    }

    pub fn gap(&self, w: WeightFunction) -> Option<&ArmGap> {
        self.gaps.iter().find(|g| g.weight_fn == w)
    }
}

/// Both arms under every weight function, with common random numbers.
pub fn run_downstream(
    recipe: &DownstreamRecipe,
    weight_fns: &[WeightFunction],
    replicates: usize,
    seed: u64,
) -> Result<DownstreamReport, DownstreamError> {
    let truth = recipe.true_counts();
    let optimal = recipe.allocation(Arm::Optimal)?;
    let uniform = recipe.allocation(Arm::Uniform)?;
    let mut rows = Vec::new();
    let mut gaps = Vec::new();
    for &w in weight_fns {
        let opt = misallocation_stats(&truth, recipe.privatizer(&optimal), w, replicates, seed)?;
        let uni = misallocation_stats(&truth, recipe.privatizer(&uniform), w, replicates, seed)?;
        if let Some((mse_gap, mse_gap_se)) = paired_mse_difference(&uni, &opt) {
            gaps.push(ArmGap {
                weight_fn: w,
                mse_gap,
                mse_gap_se,
            });
        }
        rows.push(DownstreamRow {
            weight_fn: w,
            arm: Arm::Optimal,
            stats: opt,
        });
        rows.push(DownstreamRow {
            weight_fn: w,
            arm: Arm::Uniform,
            stats: uni,
        });
    }
    Ok(DownstreamReport {
        eps_total: recipe.eps_total,
        seed,
        replicates,
        true_counts: truth,
        optimal,
        uniform,
        rows,
        gaps,
    })
}

/// Two-level hierarchy: a tract root over one leaf per count.
pub fn tract_hierarchy(tract_id: &str, counts: &[f64]) -> Result<Hierarchy, DownstreamError> {
    if counts.is_empty() {
        return Err(DownstreamError::InvalidCounts(
            "a tract needs at least one block".into(),
        ));
    }
    let width = (counts.len() - 1).to_string().len();
    let mut nodes = vec![HierNode::new(tract_id, None, 1, counts.iter().sum())];
    for (i, &c) in counts.iter().enumerate() {
        nodes.push(HierNode::new(
            format!("{tract_id}.{i:0width$}"),
            Some(tract_id),
            2,
            c,
        ));
    }
    Ok(Hierarchy::from_nodes(nodes)?)
}
