//! Per-level privacy budget allocation by water-filling on the KKT conditions.
//!
//! Both programs reduce to the same one-parameter family. For a multiplier
//! `lambda > 0`, each positive-weight level gets the unique `eps_l(lambda)`
//! with `D_l(eps_l) = -lambda`, where `D_l` is the level's weighted MSE
//! derivative. `D_l` is strictly increasing (the MSE is strictly convex in
//! eps) and bounded by `[-4 w_l |R_l| / eps^3, -2 w_l |R_l| / eps^3]`, which
//! brackets every root in closed form:
//!
//! ```text
//! eps_l(lambda) in [(2 w_l |R_l| / lambda)^(1/3), (4 w_l |R_l| / lambda)^(1/3)]
//! ```
//!
//! The outer problem is a monotone scalar equation in `ln lambda`, solved by
//! bisection. Fixed budget: `sum eps_l(lambda) = eps_total` (the constraint
//! always binds because the objective decreases in every eps_l). Target MSE:
//! `MSE_w(eps(lambda)) = tau`, with the Program multiplier `mu = 1/lambda`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{
    self, mse_d2eps_unchecked, mse_deps_unchecked, AnalyticsError, LevelWeights, MIN_EPS,
};
use crate::hierarchy::LevelStats;

/// Bracket width at which bisection stops (absolute, on eps or on `ln lambda`).
pub const BRACKET_TOL: f64 = 1e-12;
pub const MAX_ITER: usize = 200;
/// Accepted `max_l |D_l(eps_l) + lambda| / lambda` at convergence.
pub const KKT_TOL: f64 = 1e-8;
/// Accepted relative residual of the binding constraint.
pub const CONSTRAINT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("every level weight is zero")]
    NoPositiveWeight,
    #[error("{stats} levels of counts but {weights} weights")]
    LengthMismatch { stats: usize, weights: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(
        "solver did not converge after {iterations} outer iterations \
         (kkt residual {kkt_residual:.3e}, constraint residual {constraint_residual:.3e})"
    )]
    ConvergenceFailure {
        iterations: usize,
        kkt_residual: f64,
        constraint_residual: f64,
    },
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Program {
    /// Minimize the weighted MSE subject to `sum eps <= eps_total`.
    FixedBudget,
    /// Minimize `sum eps` subject to the weighted MSE `<= tau`.
    TargetMSE,
    /// Even split baseline.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetAllocation {
    pub eps: Vec<f64>,
    pub eps_total_used: f64,
    /// Weighted MSE at `eps`; absent for a uniform split built without counts.
    #[serde(rename = "objective")]
    pub objective_value: Option<f64>,
    /// `lambda` for [`Program::FixedBudget`], `mu` for [`Program::TargetMSE`].
    pub multiplier: Option<f64>,
    pub program: Program,
    pub weights: LevelWeights,
}

impl BudgetAllocation {
    pub fn depth(&self) -> usize {
        self.eps.len()
    }

    /// Fills in the weighted objective for `stats` and `w`.
    pub fn with_objective(
        mut self,
        stats: &LevelStats,
        w: &LevelWeights,
    ) -> Result<Self, AllocError> {
        self.objective_value = Some(analytics::weighted_total_mse(stats, w, &self.eps)?);
        self.weights = w.clone();
        Ok(self)
    }
}

/// `D_l(eps) = w_l sum_{j in R_l} dmse/deps(N_j, eps)`.
pub fn level_marginal(
    stats: &LevelStats,
    w: &LevelWeights,
    level: usize,
    eps: f64,
) -> Result<f64, AllocError> {
    check_shapes(stats, w)?;
    if level == 0 || level > stats.depth() {
        return Err(AllocError::InvalidInput(format!(
            "level {level} out of range"
        )));
    }
    let wl = w.as_slice()[level - 1];
    if wl <= 0.0 {
        return Err(AllocError::InvalidInput(format!(
            "level {level} has zero weight"
        )));
    }
    let mut sum = 0.0;
    for &n in stats.level(level) {
        sum += analytics::mse_deps(n, eps)?;
    }
    Ok(wl * sum)
}

fn check_shapes(stats: &LevelStats, w: &LevelWeights) -> Result<(), AllocError> {
    if stats.depth() != w.len() {
        return Err(AllocError::LengthMismatch {
            stats: stats.depth(),
            weights: w.len(),
        });
    }
    Ok(())
}

/// One positive-weight level seen by the solver.
struct LevelCurve<'a> {
    index: usize,
    weight: f64,
    counts: &'a [f64],
}

impl LevelCurve<'_> {
    fn mass(&self) -> f64 {
        self.weight * self.counts.len() as f64
    }

    /// `(D_l(eps), D_l'(eps))`
    fn marginal(&self, eps: f64) -> (f64, f64) {
        let (mut d, mut d2) = (0.0, 0.0);
        for &n in self.counts {
            d += mse_deps_unchecked(n, eps);
            d2 += mse_d2eps_unchecked(n, eps);
        }
        (self.weight * d, self.weight * d2)
    }

    /// Root of `D_l(eps) = -lambda`: bisection on the closed bracket,
    /// refined with safeguarded Newton steps.
    fn eps_for(&self, lambda: f64) -> f64 {
        let mut lo = (2.0 * self.mass() / lambda).cbrt();
        let mut hi = (4.0 * self.mass() / lambda).cbrt();
        let mut x = 0.5 * (lo + hi);
        for _ in 0..MAX_ITER {
            let (d, dd) = self.marginal(x);
            let f = d + lambda;
            if f == 0.0 {
                return x;
            }
            if f < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let newton = x - f / dd;
            let next = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            let step = (next - x).abs();
            x = next;
            if hi - lo <= BRACKET_TOL || step <= 4.0 * f64::EPSILON * x {
                break;
            }
        }
        x
    }
}

struct Solver<'a> {
    curves: Vec<LevelCurve<'a>>,
    depth: usize,
    weights: LevelWeights,
    stats: &'a LevelStats,
}

impl<'a> Solver<'a> {
    fn new(stats: &'a LevelStats, w: &LevelWeights) -> Result<Self, AllocError> {
        check_shapes(stats, w)?;
        let curves: Vec<_> = stats
            .levels()
            .iter()
            .zip(w.as_slice())
            .enumerate()
            .filter(|(_, (_, &wl))| wl > 0.0)
            .map(|(index, (counts, &weight))| LevelCurve {
                index,
                weight,
                counts,
            })
            .collect();
        if curves.is_empty() {
            return Err(AllocError::NoPositiveWeight);
        }
        Ok(Self {
            curves,
            depth: stats.depth(),
            weights: w.clone(),
            stats,
        })
    }

    fn eps_at(&self, lambda: f64) -> Vec<f64> {
        let mut eps = vec![0.0; self.depth];
        for c in &self.curves {
            eps[c.index] = c.eps_for(lambda);
        }
        eps
    }

    fn objective(&self, eps: &[f64]) -> Result<f64, AllocError> {
        Ok(analytics::weighted_total_mse(
            self.stats,
            &self.weights,
            eps,
        )?)
    }

    /// Bisection on `ln lambda` for an increasing `phi(lambda)`, returning the
    /// lambda where `phi` crosses zero and the iteration count.
    fn bisect_log(&self, lo: f64, hi: f64, mut phi: impl FnMut(f64) -> f64) -> (f64, usize) {
        let (mut a, mut b) = (lo.ln(), hi.ln());
        let mut iterations = 0;
        while b - a > BRACKET_TOL && iterations < MAX_ITER {
            let mid = 0.5 * (a + b);
            if phi(mid.exp()) < 0.0 {
                a = mid;
            } else {
                b = mid;
            }
            iterations += 1;
        }
        ((0.5 * (a + b)).exp(), iterations)
    }

    fn kkt_residual(&self, eps: &[f64], lambda: f64) -> f64 {
        self.curves
            .iter()
            .map(|c| (c.marginal(eps[c.index]).0 + lambda).abs() / lambda)
            .fold(0.0, f64::max)
    }

    fn check_eps_floor(&self, eps: &[f64]) -> Result<(), AllocError> {
        match self.curves.iter().find(|c| eps[c.index] < MIN_EPS) {
            Some(c) => Err(AllocError::InvalidInput(format!(
                "level {} would receive eps {:e}, below the {MIN_EPS:e} floor",
                c.index + 1,
                eps[c.index]
            ))),
            None => Ok(()),
        }
    }
}

/// Minimizes the weighted MSE subject to `sum eps_l <= eps_total`.
///
/// Zero-weight levels receive `eps = 0`.
pub fn allocate_fixed_budget(
    stats: &LevelStats,
    w: &LevelWeights,
    eps_total: f64,
) -> Result<BudgetAllocation, AllocError> {
    if !(eps_total.is_finite() && eps_total > 0.0) {
        return Err(AllocError::InvalidInput(format!(
            "eps_total must be > 0, got {eps_total}"
        )));
    }
    let solver = Solver::new(stats, w)?;
    if let [only] = solver.curves.as_slice() {
        return single_level(&solver, only, eps_total);
    }
    let s2: f64 = solver.curves.iter().map(|c| (2.0 * c.mass()).cbrt()).sum();
    let s4: f64 = solver.curves.iter().map(|c| (4.0 * c.mass()).cbrt()).sum();
    let lo = (s2 / eps_total).powi(3);
    let hi = (s4 / eps_total).powi(3);

    // sum eps(lambda) decreases in lambda.
    let (lambda, iterations) =
        solver.bisect_log(lo, hi, |l| eps_total - solver.eps_at(l).iter().sum::<f64>());
    let mut eps = solver.eps_at(lambda);
    solver.check_eps_floor(&eps)?;
    let constraint_residual = (eps.iter().sum::<f64>() - eps_total).abs() / eps_total;
    // The bracket leaves a ~1e-13 slack; spend it so the budget binds.
    let scale = eps_total / eps.iter().sum::<f64>();
    eps.iter_mut().for_each(|e| *e *= scale);
    let used: f64 = eps.iter().sum();
    let kkt_residual = solver.kkt_residual(&eps, lambda);
    if kkt_residual > KKT_TOL || constraint_residual > CONSTRAINT_TOL {
        return Err(AllocError::ConvergenceFailure {
            iterations,
            kkt_residual,
            constraint_residual,
        });
    }
    let objective = solver.objective(&eps)?;
    Ok(BudgetAllocation {
        eps,
        eps_total_used: used,
        objective_value: Some(objective),
        multiplier: Some(lambda),
        program: Program::FixedBudget,
        weights: w.clone(),
    })
}

fn single_level(
    solver: &Solver<'_>,
    curve: &LevelCurve<'_>,
    eps_total: f64,
) -> Result<BudgetAllocation, AllocError> {
    let mut eps = vec![0.0; solver.depth];
    eps[curve.index] = eps_total;
    solver.check_eps_floor(&eps)?;
    Ok(BudgetAllocation {
        objective_value: Some(solver.objective(&eps)?),
        multiplier: Some(-curve.marginal(eps_total).0),
        eps,
        eps_total_used: eps_total,
        program: Program::FixedBudget,
        weights: solver.weights.clone(),
    })
}

/// Minimizes `sum eps_l` subject to the weighted MSE `<= tau`.
///
/// Every `tau > 0` is feasible because the MSE vanishes as eps grows.
pub fn allocate_target_mse(
    stats: &LevelStats,
    w: &LevelWeights,
    tau: f64,
) -> Result<BudgetAllocation, AllocError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(AllocError::InvalidInput(format!(
            "tau must be > 0, got {tau}"
        )));
    }
    let solver = Solver::new(stats, w)?;
    // MSE_w(lambda) lies in [lambda^(2/3) a_lo, lambda^(2/3) a_hi].
    let a_lo: f64 = solver
        .curves
        .iter()
        .map(|c| c.mass() / (4.0 * c.mass()).powf(2.0 / 3.0))
        .sum();
    let a_hi: f64 = solver
        .curves
        .iter()
        .map(|c| 2.0 * c.mass() / (2.0 * c.mass()).powf(2.0 / 3.0))
        .sum();
    let lo = (tau / a_hi).powf(1.5);
    let hi = (tau / a_lo).powf(1.5);

    let mut failure = None;
    let (lambda, iterations) = solver.bisect_log(lo, hi, |l| {
        let eps = solver.eps_at(l);
        if eps.iter().any(|&e| e > 0.0 && e < MIN_EPS) {
            // Tiny budgets mean an enormous MSE: treat as above target.
            return -1.0;
        }
        match solver.objective(&eps) {
            Ok(obj) => obj - tau,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let eps = solver.eps_at(lambda);
    solver.check_eps_floor(&eps)?;
    let objective = solver.objective(&eps)?;
    let kkt_residual = solver.kkt_residual(&eps, lambda);
    let constraint_residual = (objective - tau).abs() / tau;
    if kkt_residual > KKT_TOL || constraint_residual > CONSTRAINT_TOL {
        return Err(AllocError::ConvergenceFailure {
            iterations,
            kkt_residual,
            constraint_residual,
        });
    }
    Ok(BudgetAllocation {
        eps_total_used: eps.iter().sum(),
        eps,
        objective_value: Some(objective),
        multiplier: Some(1.0 / lambda),
        program: Program::TargetMSE,
        weights: w.clone(),
    })
}

/// `eps_l = eps_total / L` on every level, with equal weights recorded.
pub fn uniform_allocation(levels: usize, eps_total: f64) -> Result<BudgetAllocation, AllocError> {
    if levels == 0 {
        return Err(AllocError::InvalidInput(
            "at least one level is required".into(),
        ));
    }
    if !(eps_total.is_finite() && eps_total > 0.0) {
        return Err(AllocError::InvalidInput(format!(
            "eps_total must be > 0, got {eps_total}"
        )));
    }
    let eps = vec![eps_total / levels as f64; levels];
    Ok(BudgetAllocation {
        eps_total_used: eps.iter().sum(),
        eps,
        objective_value: None,
        multiplier: None,
        program: Program::Uniform,
        weights: LevelWeights::equal(levels),
    })
}
