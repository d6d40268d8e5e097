//! Monte Carlo evaluation of released hierarchies.
//!
//! Replicates are split into fixed-size chunks that run in parallel; chunk
//! results are combined in chunk order, so estimates are bit-identical for
//! any worker count. Every arm draws node `j` of replicate `r` from the same
//! counter-based stream, which gives common random numbers across arms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{allocate_fixed_budget, uniform_allocation, AllocError, BudgetAllocation};
use crate::analytics::{self, AnalyticsError, LevelWeights};
use crate::hierarchy::{level_stats, Hierarchy, LevelStats};
use crate::release::{project_top_down, NoiseEngine};

const CHUNK: usize = 16;
pub const MIN_REPLICATES: usize = 100;
/// Half-width of the agreement band, in standard errors.
pub const SE_BAND: f64 = 4.0;

/// Default total-budget grid for optimized-vs-uniform comparisons.
pub const DEFAULT_EPS_GRID: [f64; 6] = [0.1, 0.25, 0.5, 1.0, 1.5, 2.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("need at least {min} replicates, got {got}")]
    TooFewReplicates { min: usize, got: usize },
    #[error("allocation has {alloc} levels but the hierarchy has {depth}")]
    AllocationMismatch { alloc: usize, depth: usize },
    #[error("level {0} has no budget; every level must be released for evaluation")]
    UnreleasedLevel(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMoments {
    pub level: usize,
    pub nodes: usize,
    pub bias_sq: f64,
    pub variance: f64,
    pub mse: f64,
    pub bias_sq_se: f64,
    pub variance_se: f64,
    pub mse_se: f64,
}

/// Empirical moments of `noisy - true`, summed over nodes.
///
/// `bias_sq` is the unbiased estimator `sum_j (mean_j^2 - s_j^2 / R)`, and
/// `variance` uses the `R - 1` denominator, so `bias_sq + variance == mse`
/// up to rounding. Standard errors come from per-replicate aggregates; the
/// `bias_sq` error adds the second-order term that dominates when the true
/// bias is near zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub bias_sq: f64,
    pub variance: f64,
    pub mse: f64,
    pub bias_sq_se: f64,
    pub variance_se: f64,
    pub mse_se: f64,
    pub replicates: usize,
    pub per_level: Vec<LevelMoments>,
}

/// Closed-form totals for one allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticMoments {
    pub bias_sq: f64,
    pub variance: f64,
    pub mse: f64,
    pub level_mse: Vec<f64>,
}

pub fn analytic_moments(stats: &LevelStats, eps: &[f64]) -> Result<AnalyticMoments, HarnessError> {
    if stats.depth() != eps.len() {
        return Err(HarnessError::AllocationMismatch {
            alloc: eps.len(),
            depth: stats.depth(),
        });
    }
    let (mut bias_sq, mut variance) = (0.0, 0.0);
    let mut level_mse = Vec::with_capacity(eps.len());
    for (l, (counts, &e)) in stats.levels().iter().zip(eps).enumerate() {
        if e <= 0.0 {
            return Err(HarnessError::UnreleasedLevel(l + 1));
        }
        let mut m = 0.0;
        for &n in counts {
            let b = analytics::bias(n, e)?;
            bias_sq += b * b;
            variance += analytics::variance(n, e)?;
            m += analytics::mse(n, e)?;
        }
        level_mse.push(m);
    }
    Ok(AnalyticMoments {
        bias_sq,
        variance,
        mse: level_mse.iter().sum(),
        level_mse,
    })
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.max(0.0).sqrt())
}

struct ChunkSums {
    s1: Vec<f64>,
    s2: Vec<f64>,
    /// Squared error per level, one row per replicate.
    sq: Vec<Vec<f64>>,
}

struct Simulation<'h> {
    h: &'h Hierarchy,
    engine: NoiseEngine<'h>,
    seed: u64,
    replicates: usize,
    with_hier: bool,
}

impl Simulation<'_> {
    fn chunks(&self) -> Vec<std::ops::Range<usize>> {
        (0..self.replicates)
            .step_by(CHUNK)
            .map(|s| s..(s + CHUNK).min(self.replicates))
            .collect()
    }

    /// Runs `visit(replicate, errors)` over the replicates of one chunk.
    fn for_each_replicate(
        &self,
        chunk: std::ops::Range<usize>,
        mut visit: impl FnMut(usize, &[f64]),
    ) {
        let n = self.h.len();
        let mut values = vec![0.0; n];
        let mut errors = vec![0.0; n];
        let (mut scratch, mut kids) = (Vec::new(), Vec::new());
        for r in chunk {
            self.engine.fill(self.seed, r as u64, &mut values);
            if self.with_hier {
                project_top_down(self.h, &mut values, &mut scratch, &mut kids);
            }
            for (i, node) in self.h.nodes().iter().enumerate() {
                errors[i] = values[i] - node.count;
            }
            visit(r, &errors);
        }
    }

    fn run(&self) -> MomentEstimate {
        let h = self.h;
        let n = h.len();
        let depth = h.depth();
        let level_of: Vec<usize> = h.nodes().iter().map(|x| x.level - 1).collect();

        // Pass 1: per-node sums and per-replicate squared-error totals.
        let pass1: Vec<ChunkSums> = self
            .chunks()
            .into_par_iter()
            .map(|chunk| {
                let mut c = ChunkSums {
                    s1: vec![0.0; n],
                    s2: vec![0.0; n],
                    sq: Vec::with_capacity(chunk.len()),
                };
                self.for_each_replicate(chunk, |_, e| {
                    let mut per_level = vec![0.0; depth];
                    for i in 0..n {
                        c.s1[i] += e[i];
                        c.s2[i] += e[i] * e[i];
                        per_level[level_of[i]] += e[i] * e[i];
                    }
                    c.sq.push(per_level);
                });
                c
            })
            .collect();
        let mut s1 = vec![0.0; n];
        let mut s2 = vec![0.0; n];
        let mut sq_by_rep = Vec::with_capacity(self.replicates);
        for c in pass1 {
            for i in 0..n {
                s1[i] += c.s1[i];
                s2[i] += c.s2[i];
            }
            sq_by_rep.extend(c.sq);
        }

        let r = self.replicates as f64;
        let mean: Vec<f64> = s1.iter().map(|s| s / r).collect();
        let var: Vec<f64> = (0..n)
            .map(|i| ((s2[i] - r * mean[i] * mean[i]) / (r - 1.0)).max(0.0))
            .collect();

        // Pass 2: regenerate the same draws for the influence terms.
        let pass2: Vec<Vec<(Vec<f64>, Vec<f64>)>> = self
            .chunks()
            .into_par_iter()
            .map(|chunk| {
                let mut out = Vec::with_capacity(chunk.len());
                self.for_each_replicate(chunk, |_, e| {
                    let mut b = vec![0.0; depth];
                    let mut v = vec![0.0; depth];
                    for i in 0..n {
                        let d = e[i] - mean[i];
                        b[level_of[i]] += 2.0 * mean[i] * d;
                        v[level_of[i]] += d * d * r / (r - 1.0);
                    }
                    out.push((b, v));
                });
                out
            })
            .collect();
        let infl: Vec<(Vec<f64>, Vec<f64>)> = pass2.into_iter().flatten().collect();

        let mut per_level = Vec::with_capacity(depth);
        for l in 0..depth {
            let range = h.level_range(l + 1);
            let bias_sq: f64 = range.clone().map(|i| mean[i] * mean[i] - var[i] / r).sum();
            let variance: f64 = range.clone().map(|i| var[i]).sum();
            let second: f64 =
                range.clone().map(|i| 2.0 * var[i] * var[i]).sum::<f64>() / (r * (r - 1.0));
            let sq: Vec<f64> = sq_by_rep.iter().map(|x| x[l]).collect();
            let b: Vec<f64> = infl.iter().map(|x| x.0[l]).collect();
            let v: Vec<f64> = infl.iter().map(|x| x.1[l]).collect();
            let (mse, mse_sd) = mean_sd(&sq);
            let (_, b_sd) = mean_sd(&b);
            let (_, v_sd) = mean_sd(&v);
            per_level.push(LevelMoments {
                level: l + 1,
                nodes: range.len(),
                bias_sq,
                variance,
                mse,
                bias_sq_se: (b_sd * b_sd / r + second).sqrt(),
                variance_se: v_sd / r.sqrt(),
                mse_se: mse_sd / r.sqrt(),
            });
        }

        let sum = |x: &[f64]| x.iter().sum::<f64>();
        let sq_tot: Vec<f64> = sq_by_rep.iter().map(|x| sum(x)).collect();
        let b_tot: Vec<f64> = infl.iter().map(|x| sum(&x.0)).collect();
        let v_tot: Vec<f64> = infl.iter().map(|x| sum(&x.1)).collect();
        let second_tot: f64 = var.iter().map(|v| 2.0 * v * v).sum::<f64>() / (r * (r - 1.0));
        let (mse, mse_sd) = mean_sd(&sq_tot);
        let (_, b_sd) = mean_sd(&b_tot);
        let (_, v_sd) = mean_sd(&v_tot);
        MomentEstimate {
            bias_sq: per_level.iter().map(|l| l.bias_sq).sum(),
            variance: per_level.iter().map(|l| l.variance).sum(),
            mse,
            bias_sq_se: (b_sd * b_sd / r + second_tot).sqrt(),
            variance_se: v_sd / r.sqrt(),
            mse_se: mse_sd / r.sqrt(),
            replicates: self.replicates,
            per_level,
        }
    }
}

/// Empirical bias², variance and MSE of the release under `alloc`, with or
/// without the consistency projection.
pub fn monte_carlo_moments(
    h: &Hierarchy,
    alloc: &BudgetAllocation,
    replicates: usize,
    seed: u64,
    with_hier: bool,
) -> Result<MomentEstimate, HarnessError> {
    if replicates < MIN_REPLICATES {
        return Err(HarnessError::TooFewReplicates {
            min: MIN_REPLICATES,
            got: replicates,
        });
    }
    monte_carlo_unchecked(h, &alloc.eps, replicates, seed, with_hier)
}

pub(crate) fn monte_carlo_unchecked(
    h: &Hierarchy,
    eps: &[f64],
    replicates: usize,
    seed: u64,
    with_hier: bool,
) -> Result<MomentEstimate, HarnessError> {
    if eps.len() != h.depth() {
        return Err(HarnessError::AllocationMismatch {
            alloc: eps.len(),
            depth: h.depth(),
        });
    }
    if let Some(l) = eps.iter().position(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(HarnessError::UnreleasedLevel(l + 1));
    }
    if replicates < 2 {
        return Err(HarnessError::TooFewReplicates {
            min: 2,
            got: replicates,
        });
    }
    Ok(Simulation {
        h,
        engine: NoiseEngine::new(h, eps),
        seed,
        replicates,
        with_hier,
    }
    .run())
}

/// Outcome of comparing an estimate to a closed form within the SE band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeCheck {
    pub expected: f64,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub rerun: bool,
    pub passed: bool,
}

/// Checks `|estimate - expected| <= SE_BAND * se`; a failing cell is rerun
/// once through `rerun` (meant to use four times the replicates).
pub fn check_within_se(
    expected: f64,
    first: (f64, f64),
    rerun: impl FnOnce() -> (f64, f64),
) -> SeCheck {
    let z = |(est, se): (f64, f64)| {
        if se > 0.0 {
            (est - expected).abs() / se
        } else if est == expected {
            0.0
        } else {
            f64::INFINITY
        }
    };
    let z1 = z(first);
    if z1 <= SE_BAND {
        return SeCheck {
            expected,
            estimate: first.0,
            se: first.1,
            z: z1,
            rerun: false,
            passed: true,
        };
    }
    let second = rerun();
    let z2 = z(second);
    SeCheck {
        expected,
        estimate: second.0,
        se: second.1,
        z: z2,
        rerun: true,
        passed: z2 <= SE_BAND,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRatios {
    pub bias_sq: f64,
    pub variance: f64,
    pub mse: f64,
}

/// Optimized vs uniform allocation: four arms (allocation x consistency).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub eps_total: f64,
    pub seed: u64,
    pub replicates: usize,
    pub optimized: BudgetAllocation,
    pub uniform: BudgetAllocation,
    pub analytic_optimized: AnalyticMoments,
    pub analytic_uniform: AnalyticMoments,
    pub optimized_no_hier: MomentEstimate,
    pub optimized_with_hier: MomentEstimate,
    pub uniform_no_hier: MomentEstimate,
    pub uniform_with_hier: MomentEstimate,
    /// uniform / optimized, closed forms (no consistency step).
    pub analytic_ratio: ArmRatios,
    /// uniform / optimized, empirical, without consistency.
    pub no_hier_ratio: ArmRatios,
    /// uniform / optimized, empirical, with consistency.
    pub with_hier_ratio: ArmRatios,
}

fn ratios(u: (f64, f64, f64), o: (f64, f64, f64)) -> ArmRatios {
    ArmRatios {
        bias_sq: u.0 / o.0,
        variance: u.1 / o.1,
        mse: u.2 / o.2,
    }
}

/// Runs the four arms with common random numbers.
///
/// Budgets are chosen from `prior` when given (previously released data),
/// otherwise from `h` itself; errors are always measured against `h`.
pub fn compare_allocations(
    h: &Hierarchy,
    prior: Option<&LevelStats>,
    eps_total: f64,
    w: &LevelWeights,
    replicates: usize,
    seed: u64,
) -> Result<ComparisonReport, HarnessError> {
    let truth = level_stats(h);
    let stats = prior.unwrap_or(&truth);
    if stats.depth() != h.depth() {
        return Err(HarnessError::InvalidInput(format!(
            "prior has {} levels, hierarchy has {}",
            stats.depth(),
            h.depth()
        )));
    }
    let optimized = allocate_fixed_budget(stats, w, eps_total)?;
    let uniform = uniform_allocation(h.depth(), eps_total)?.with_objective(stats, w)?;
    let analytic_optimized = analytic_moments(&truth, &optimized.eps)?;
    let analytic_uniform = analytic_moments(&truth, &uniform.eps)?;
    let run = |a: &BudgetAllocation, hier| monte_carlo_moments(h, a, replicates, seed, hier);
    let optimized_no_hier = run(&optimized, false)?;
    let optimized_with_hier = run(&optimized, true)?;
    let uniform_no_hier = run(&uniform, false)?;
    let uniform_with_hier = run(&uniform, true)?;
    let t = |m: &MomentEstimate| (m.bias_sq, m.variance, m.mse);
    let ta = |m: &AnalyticMoments| (m.bias_sq, m.variance, m.mse);
    Ok(ComparisonReport {
        eps_total,
        seed,
        replicates,
        analytic_ratio: ratios(ta(&analytic_uniform), ta(&analytic_optimized)),
        no_hier_ratio: ratios(t(&uniform_no_hier), t(&optimized_no_hier)),
        with_hier_ratio: ratios(t(&uniform_with_hier), t(&optimized_with_hier)),
        optimized,
        uniform,
        analytic_optimized,
        analytic_uniform,
        optimized_no_hier,
        optimized_with_hier,
        uniform_no_hier,
        uniform_with_hier,
    })
}

/// One row per `(eps_total, arm, hier)` for plotting.
pub fn comparison_plot_csv(reports: &[ComparisonReport]) -> String {
    let mut out = String::from(
        "eps_total,arm,hier,bias_sq,bias_sq_se,variance,variance_se,mse,mse_se,analytic_bias_sq,analytic_variance,analytic_mse\n",
    );
    for r in reports {
        let arms = [
            (
                "optimized",
                false,
                &r.optimized_no_hier,
                &r.analytic_optimized,
            ),
            (
                "optimized",
                true,
                &r.optimized_with_hier,
                &r.analytic_optimized,
            ),
            ("uniform", false, &r.uniform_no_hier, &r.analytic_uniform),
            ("uniform", true, &r.uniform_with_hier, &r.analytic_uniform),
        ];
        for (arm, hier, m, a) in arms {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.eps_total,
                arm,
                hier,
                m.bias_sq,
                m.bias_sq_se,
                m.variance,
                m.variance_se,
                m.mse,
                m.mse_se,
                a.bias_sq,
                a.variance,
                a.mse
            ));
        }
    }
    out
}

/// One point of the last-level weight ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub w_last: f64,
    pub weights: LevelWeights,
    pub allocation: BudgetAllocation,
    /// Unweighted analytic MSE per level.
    pub level_mse: Vec<f64>,
    pub total_mse: f64,
    pub empirical: Option<MomentEstimate>,
}

/// Sweeps the weight on the last level; the remaining weight is split evenly
/// over the other levels (`w_1 = w_2 = (1 - w_3) / 2` for three levels).
/// `replicates == 0` skips the Monte Carlo part.
pub fn weight_sweep(
    h: &Hierarchy,
    prior: Option<&LevelStats>,
    eps_total: f64,
    w_last_grid: &[f64],
    replicates: usize,
    seed: u64,
) -> Result<Vec<SweepPoint>, HarnessError> {
    let depth = h.depth();
    if depth < 2 {
        return Err(HarnessError::InvalidInput(
            "weight sweep needs at least 2 levels".into(),
        ));
    }
    let truth = level_stats(h);
    let stats = prior.unwrap_or(&truth);
    w_last_grid
        .iter()
        .map(|&w_last| {
            if !(w_last > 0.0 && w_last < 1.0) {
                return Err(HarnessError::InvalidInput(format!(
                    "weight {w_last} outside (0, 1)"
                )));
            }
            let mut w = vec![(1.0 - w_last) / (depth - 1) as f64; depth];
            w[depth - 1] = w_last;
            let weights = LevelWeights::new(w)?;
            let allocation = allocate_fixed_budget(stats, &weights, eps_total)?;
            let level_mse = analytic_moments(&truth, &allocation.eps)?.level_mse;
            let empirical = if replicates > 0 {
                Some(monte_carlo_moments(
                    h,
                    &allocation,
                    replicates,
                    seed,
                    false,
                )?)
            } else {
                None
            };
            Ok(SweepPoint {
                w_last,
                total_mse: level_mse.iter().sum(),
                weights,
                allocation,
                level_mse,
                empirical,
            })
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let depth = points.first().map_or(0, |p| p.level_mse.len());
    let mut out = String::from("w_last");
    for l in 1..=depth {
        out.push_str(&format!(",eps_{l}"));
    }
    for l in 1..=depth {
        out.push_str(&format!(",mse_{l}"));
    }
    out.push_str(",total_mse\n");
    for p in points {
        out.push_str(&p.w_last.to_string());
        for e in &p.allocation.eps {
            out.push_str(&format!(",{e}"));
        }
        for m in &p.level_mse {
            out.push_str(&format!(",{m}"));
        }
        out.push_str(&format!(",{}\n", p.total_mse));
    }
    out
}
