//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use hierdp::allocator::{allocate_fixed_budget, allocate_target_mse};
use hierdp::analytics::{self, LevelWeights};
use hierdp::downstream::{run_downstream, tract_hierarchy, Arm, DownstreamRecipe, WeightFunction};
use hierdp::harness::{check_within_se, compare_allocations, weight_sweep, DEFAULT_EPS_GRID};
use hierdp::hierarchy::{
    level_stats, synth_hierarchy, Fanout, LeafDistribution, LevelStats, SynthSpec,
};
use hierdp::release::{laplace_sample, project_children};
use hierdp::skew::{balanced_split, compositions, total_bias};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// Closed forms written out literally, independent of the library's series paths.
fn mse_direct(n: f64, eps: f64) -> f64 {
    let e = (-n * eps).exp();
    (2.0 - e) / (eps * eps) - n / eps * e
}

fn deps_direct(n: f64, eps: f64) -> f64 {
    let x = n * eps;
    let e = (-x).exp();
    (x * x * e + 2.0 * x * e + 2.0 * e - 4.0) / eps.powi(3)
}

fn weighted_direct(stats: &LevelStats, w: &[f64], eps: &[f64]) -> f64 {
    stats
        .levels()
        .iter()
        .zip(w)
        .zip(eps)
        .filter(|((_, &wl), _)| wl > 0.0)
        .map(|((c, &wl), &e)| wl * c.iter().map(|&n| mse_direct(n, e)).sum::<f64>())
        .sum()
}

/// Sample mean and sample variance of `max(0, N + Lap(1/eps)) - N` with
/// their standard errors.
fn clamp_moments(n: f64, eps: f64, samples: usize, seed: u64) -> ((f64, f64), (f64, f64)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..samples)
        .map(|_| (n + laplace_sample(1.0 / eps, &mut rng).unwrap()).max(0.0) - n)
        .collect();
    let k = samples as f64;
    let mean = xs.iter().sum::<f64>() / k;
    let dev2: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = dev2.iter().sum::<f64>() / (k - 1.0);
    let sd = (dev2.iter().map(|d| (d - var) * (d - var)).sum::<f64>() / (k - 1.0)).sqrt();
    ((mean, (var / k).sqrt()), (var, sd / k.sqrt()))
}

fn c1_closed_form() -> Outcome {
    let start = Instant::now();
    let samples = 1_000_000;
    let mut worst: f64 = 0.0;
    let mut reruns = 0;
    for (i, &n) in [0.0, 1.0, 5.0, 20.0, 100.0].iter().enumerate() {
        for (j, &eps) in [0.1, 0.5, 1.0, 2.0].iter().enumerate() {
            let seed = (i * 4 + j) as u64;
            let (b, v) = clamp_moments(n, eps, samples, seed);
            let bias = analytics::bias(n, eps).unwrap();
            let var = analytics::variance(n, eps).unwrap();
            let cb = check_within_se(bias, b, || {
                clamp_moments(n, eps, 4 * samples, 1000 + seed).0
            });
            let cv = check_within_se(var, v, || clamp_moments(n, eps, 4 * samples, 1000 + seed).1);
            reruns += usize::from(cb.rerun) + usize::from(cv.rerun);
            ensure(cb.passed, || format!("bias N={n} eps={eps}: {cb:?}"))?;
            ensure(cv.passed, || format!("variance N={n} eps={eps}: {cv:?}"))?;
            worst = worst.max(cb.z).max(cv.z);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "20 cells, max |z| {worst:.2}, {reruns} reruns, {secs:.1}s"
    ))
}

fn c2_trivial_values() -> Outcome {
    let close = |a: f64, b: f64, tol: f64, what: &str| {
        ensure((a - b).abs() <= tol, || format!("{what}: {a} vs {b}"))
    };
    close(analytics::bias(0.0, 1.0).unwrap(), 0.5, 1e-12, "bias(0,1)")?;
    close(
        analytics::variance(0.0, 1.0).unwrap(),
        0.75,
        1e-12,
        "variance(0,1)",
    )?;
    for eps in [0.01, 0.1, 0.5, 1.0, 2.0, 10.0] {
        let want = 1.0 / (eps * eps);
        close(
            analytics::mse(0.0, eps).unwrap(),
            want,
            1e-12 * want.max(1.0),
            "mse(0,eps)",
        )?;
    }
    close(
        analytics::variance(1000.0, 1.0).unwrap(),
        2.0,
        1e-9,
        "variance(1000,1)",
    )?;
    close(
        analytics::mse(1000.0, 2.0).unwrap(),
        0.5,
        1e-9,
        "mse(1000,2)",
    )?;
    Ok("all exact".into())
}

fn c3_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for _ in 0..10_000 {
        let n = if rng.random_bool(0.05) {
            0.0
        } else {
            10f64.powf(rng.random_range(-3.0..4.0))
        };
        let eps = 10f64.powf(rng.random_range(-2.0..1.0));
        let m = analytics::mse(n, eps).unwrap();
        let (lo, hi) = (1.0 / (eps * eps), 2.0 / (eps * eps));
        // Past N eps ~ 37 the gap to 2/eps^2 is below one ulp and mse rounds
        // onto the bound; the log of the gap carries the strictness there.
        let strict = m < hi || analytics::ln_mse_upper_gap(n, eps).unwrap().is_finite();
        if !(m >= lo && m <= hi && strict) {
            violations += 1;
        }
    }
    ensure(violations == 0, || format!("{violations} violations"))?;
    Ok("10000 draws, 0 violations".into())
}

fn c4_convexity() -> Outcome {
    let h = 1e-4;
    let mut min_rel = f64::INFINITY;
    for i in 0..50 {
        let n = if i == 0 {
            0.0
        } else {
            10f64.powf(-2.0 + 6.0 * (i - 1) as f64 / 48.0)
        };
        for j in 0..50 {
            let eps = 10f64.powf(-1.3 + 2.0 * j as f64 / 49.0);
            let f = |e: f64| analytics::mse(n, e).unwrap();
            let d2 = f(eps + h) - 2.0 * f(eps) + f(eps - h);
            ensure(d2 > 0.0, || format!("N={n} eps={eps}: d2={d2:e}"))?;
            min_rel = min_rel.min(d2 / f(eps));
        }
    }
    Ok(format!("2500 points, min relative d2 {min_rel:.2e}"))
}

fn random_two_level(rng: &mut ChaCha8Rng) -> LevelStats {
    let k = rng.random_range(2..50);
    let leaves: Vec<f64> = (0..k)
        .map(|_| (rng.random_range(0.0f64..7.0)).exp().floor())
        .collect();
    let root = leaves.iter().sum::<f64>();
    LevelStats::new(vec![vec![root], leaves]).unwrap()
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut c, mut d) = (b - r * (b - a), a + r * (b - a));
    while b - a > 1e-13 * b.abs().max(1.0) {
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - r * (b - a);
        d = a + r * (b - a);
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

fn c5_solver_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_obj, mut worst_kkt): (f64, f64) = (0.0, 0.0);
    for inst in 0..50 {
        let stats = random_two_level(&mut rng);
        let w = vec![rng.random_range(0.2..3.0), rng.random_range(0.2..3.0)];
        let total = rng.random_range(0.1..5.0);
        let alloc =
            allocate_fixed_budget(&stats, &LevelWeights::new(w.clone()).unwrap(), total).unwrap();
        let obj = |e1: f64| weighted_direct(&stats, &w, &[e1, total - e1]);

        let step = 1e-4;
        let mut best = (step, obj(step));
        let mut e1 = step;
        while e1 < total - step / 2.0 {
            let v = obj(e1);
            if v < best.1 {
                best = (e1, v);
            }
            e1 += step;
        }
        let (_, refined) = golden_min(
            obj,
            (best.0 - step).max(1e-9),
            (best.0 + step).min(total - 1e-9),
        );
        let oracle = refined.min(best.1);
        let got = alloc.objective_value.unwrap();
        let rel = (got - oracle).abs() / oracle;
        ensure(rel <= 1e-8, || {
            format!("instance {inst}: solver {got} vs oracle {oracle}")
        })?;
        ensure(got <= best.1 * (1.0 + 1e-12), || {
            format!("instance {inst}: worse than the grid")
        })?;

        let lambda = alloc.multiplier.unwrap();
        for (l, counts) in stats.levels().iter().enumerate() {
            let d = w[l]
                * counts
                    .iter()
                    .map(|&n| deps_direct(n, alloc.eps[l]))
                    .sum::<f64>();
            let r = (d + lambda).abs();
            ensure(r <= 1e-8 * lambda, || {
                format!(
                    "instance {inst} level {}: KKT {r:e} vs lambda {lambda:e}",
                    l + 1
                )
            })?;
            worst_kkt = worst_kkt.max(r / lambda);
        }
        worst_obj = worst_obj.max(rel);
    }
    Ok(format!(
        "50 instances, max rel gap {worst_obj:.1e}, max KKT/lambda {worst_kkt:.1e}"
    ))
}

fn random_hierarchy(rng: &mut ChaCha8Rng, seed: u64) -> hierdp::hierarchy::Hierarchy {
    let depth = rng.random_range(1..=4);
    let fanouts = (1..depth)
        .map(|_| {
            let lo = rng.random_range(2..6);
            Fanout::range(lo, lo + rng.random_range(0..8))
        })
        .collect();
    synth_hierarchy(&SynthSpec {
        fanouts,
        leaf: LeafDistribution::LogNormal {
            mu: rng.random_range(0.0..5.0),
            sigma: rng.random_range(0.2..2.0),
            round: true,
        },
        seed,
    })
    .unwrap()
}

fn c6_bottom_heavy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut depths = [0usize; 4];
    for i in 0..100 {
        let h = random_hierarchy(&mut rng, i);
        let stats = level_stats(&h);
        depths[h.depth() - 1] += 1;
        let total = 10f64.powf(rng.random_range(-1.5..1.0));
        let a = allocate_fixed_budget(&stats, &LevelWeights::equal(h.depth()), total).unwrap();
        ensure(a.eps.windows(2).all(|p| p[0] <= p[1]), || {
            format!("instance {i}: {:?}", a.eps)
        })?;
    }
    Ok(format!(
        "100 hierarchies (depth counts {depths:?}), 0 exceptions"
    ))
}

fn c7_target_mse() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst_tau, mut worst_trip): (f64, f64) = (0.0, 0.0);
    for i in 0..20 {
        let h = random_hierarchy(&mut rng, 100 + i);
        let stats = level_stats(&h);
        let w: Vec<f64> = (0..h.depth()).map(|_| rng.random_range(0.2..3.0)).collect();
        let weights = LevelWeights::new(w.clone()).unwrap();
        let total = 10f64.powf(rng.random_range(-1.0..0.7));
        let fixed = allocate_fixed_budget(&stats, &weights, total).unwrap();
        let tau = weighted_direct(&stats, &w, &fixed.eps);
        let target = allocate_target_mse(&stats, &weights, tau).unwrap();
        let achieved = weighted_direct(&stats, &w, &target.eps);
        let rel_tau = (achieved - tau).abs() / tau;
        let rel_trip = (target.eps_total_used - total).abs() / total;
        ensure(rel_tau <= 1e-9, || {
            format!("instance {i}: mse {achieved} vs tau {tau}")
        })?;
        ensure(rel_trip <= 1e-4, || {
            format!("instance {i}: eps {} vs {total}", target.eps_total_used)
        })?;
        worst_tau = worst_tau.max(rel_tau);
        worst_trip = worst_trip.max(rel_trip);
    }
    Ok(format!(
        "20 instances, max rel tau error {worst_tau:.1e}, max eps round trip {worst_trip:.1e}"
    ))
}

/// Exhaustive active sets: on support S the projection is `y_i - theta`
/// with `theta = (sum_S y - t) / |S|`; keep feasible candidates, take the
/// closest.
fn qp_oracle(y: &[f64], t: f64) -> Vec<f64> {
    let n = y.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let theta = (support.iter().map(|&i| y[i]).sum::<f64>() - t) / support.len() as f64;
        let mut x = vec![0.0; n];
        let mut feasible = true;
        for &i in &support {
            x[i] = y[i] - theta;
            feasible &= x[i] >= -1e-12;
        }
        if !feasible {
            continue;
        }
        let d: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, x));
        }
    }
    best.unwrap().1
}

fn c8_projection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let n = rng.random_range(1..=10);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..150.0)).collect();
        let t = rng.random_range(0.0..300.0);
        let got = project_children(&y, t);
        let want = qp_oracle(&y, t);
        let err = got
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure(err <= 1e-9, || format!("instance {i}: {got:?} vs {want:?}"))?;
        worst = worst.max(err);
    }
    Ok(format!("200 instances, max error {worst:.1e}"))
}

fn c9_wyoming() -> Outcome {
    let start = Instant::now();
    let h = synth_hierarchy(&SynthSpec::wyoming_like(0)).unwrap();
    let w = LevelWeights::equal(3);
    let mut ratios = Vec::new();
    for eps in DEFAULT_EPS_GRID {
        let r = compare_allocations(&h, None, eps, &w, 1000, 0).unwrap();
        ensure(r.analytic_optimized.mse < r.analytic_uniform.mse, || {
            format!(
                "eps {eps}: optimized {} vs uniform {}",
                r.analytic_optimized.mse, r.analytic_uniform.mse
            )
        })?;
        let arms = [
            (
                "optimized",
                &r.optimized,
                &r.optimized_no_hier,
                r.analytic_optimized.mse,
            ),
            (
                "uniform",
                &r.uniform,
                &r.uniform_no_hier,
                r.analytic_uniform.mse,
            ),
        ];
        for (name, alloc, mc, exact) in arms {
            let c = check_within_se(exact, (mc.mse, mc.mse_se), || {
                let m = hierdp::harness::monte_carlo_moments(&h, alloc, 4000, 1, false).unwrap();
                (m.mse, m.mse_se)
            });
            ensure(c.passed, || format!("eps {eps} {name}: {c:?}"))?;
        }
        ratios.push(format!(
            "{eps}: mse x{:.2} bias2 x{:.1} var x{:.2}",
            r.analytic_ratio.mse, r.analytic_ratio.bias_sq, r.analytic_ratio.variance
        ));
    }
    Ok(format!(
        "{} nodes, {:.0}s; uniform/optimized {}",
        h.len(),
        start.elapsed().as_secs_f64(),
        ratios.join("; ")
    ))
}

fn c10_weight_ablation() -> Outcome {
    let h = synth_hierarchy(&SynthSpec::wyoming_like(0)).unwrap();
    let grid: Vec<f64> = (1..=19).map(|i| i as f64 * 0.05).collect();
    let pts = weight_sweep(&h, None, 1.0, &grid, 0, 0).unwrap();
    let argmin = pts
        .iter()
        .min_by(|a, b| a.total_mse.total_cmp(&b.total_mse))
        .map(|p| p.w_last)
        .unwrap();
    let nearest = grid
        .iter()
        .copied()
        .min_by(|a, b| (a - 1.0 / 3.0).abs().total_cmp(&(b - 1.0 / 3.0).abs()))
        .unwrap();
    ensure(argmin == nearest, || {
        format!("minimum at w3={argmin}, expected {nearest}")
    })?;
    for pair in pts.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        ensure(b.level_mse[2] <= a.level_mse[2], || {
            format!("MSE_3 rises at w3={}", b.w_last)
        })?;
        let upper = |p: &hierdp::harness::SweepPoint| p.level_mse[0] + p.level_mse[1];
        ensure(upper(b) >= upper(a), || {
            format!("MSE_1+MSE_2 falls at w3={}", b.w_last)
        })?;
    }
    Ok(format!(
        "minimum at w3={argmin:.2}, monotone over {} points",
        pts.len()
    ))
}

fn c11_skewness() -> Outcome {
    for regions in [2, 3] {
        let splits = compositions(100, regions);
        for eps in [0.05, 0.1, 0.5] {
            let balanced = total_bias(&balanced_split(100, regions), eps).unwrap();
            for s in &splits {
                let mut sorted = s.clone();
                sorted.sort_unstable_by(|a, b| b.cmp(a));
                // sorted order so permutations of one split sum identically
                let b = total_bias(&sorted, eps).unwrap();
                let is_balanced = sorted == balanced_split(100, regions);
                ensure(b > balanced || (is_balanced && b == balanced), || {
                    format!("{s:?} eps {eps}: {b} vs balanced {balanced}")
                })?;
            }
        }
    }
    let v = total_bias(&[50, 50], 0.1).unwrap();
    let want = 2.0 * 5.0 * (-5.0f64).exp();
    ensure((v - want).abs() <= 1e-5, || {
        format!("(50,50): {v} vs {want}")
    })?;
    Ok(format!(
        "101 + 5151 splits x 3 eps, (50,50) at 0.1 = {v:.5}"
    ))
}

fn c12_downstream() -> Outcome {
    let counts = [
        500.0, 200.0, 100.0, 50.0, 50.0, 30.0, 30.0, 20.0, 10.0, 10.0,
    ];
    let recipe = DownstreamRecipe::new(tract_hierarchy("tract", &counts).unwrap(), 1.0);
    let rep = run_downstream(&recipe, &WeightFunction::ALL, 10_000, 0).unwrap();
    let mut notes = Vec::new();
    for w in WeightFunction::ALL {
        let opt = rep.row(w, Arm::Optimal).unwrap();
        let uni = rep.row(w, Arm::Uniform).unwrap();
        ensure(opt.mse_pct <= uni.mse_pct, || {
            format!("{w}: optimal {} > uniform {}", opt.mse_pct, uni.mse_pct)
        })?;
        notes.push(format!("{w} {:.3}/{:.3}", opt.mse_pct, uni.mse_pct));
    }
    for arm in Arm::ALL {
        let q = rep.row(WeightFunction::Quadratic, arm).unwrap().jensen_gap;
        let l = rep.row(WeightFunction::Log, arm).unwrap().jensen_gap;
        ensure(q > 0.0 && l < 0.0, || {
            format!("{arm:?}: quadratic gap {q:e}, log gap {l:e}")
        })?;
    }
    Ok(format!(
        "misallocation mse optimal/uniform: {}",
        notes.join(", ")
    ))
}

fn run_cli(args: &[&str], threads: &str, env_threads: Option<&str>) -> Result<Vec<u8>, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hierdp"));
    cmd.args(args)
        .args(["--threads", threads])
        .env_remove("HIERDP_THREADS");
    if let Some(t) = env_threads {
        cmd.env("HIERDP_THREADS", t);
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out.stdout)
}

fn outputs_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map(|it| {
            it.flatten()
                .map(|e| {
                    (
                        e.file_name().to_string_lossy().into_owned(),
                        std::fs::read(e.path()).unwrap(),
                    )
                })
                .collect()
        })
        .unwrap_or_default();
    files.sort();
    files
}

fn c13_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let va = tmp.path().join("va.csv");
    std::fs::write(
        &va,
        "node_id,parent_id,level,count\nVA,,1,450\nVA-100,VA,2,300\nVA-200,VA,2,150\n\
         VA-100-1,VA-100,3,120\nVA-100-2,VA-100,3,80\nVA-100-3,VA-100,3,100\n\
         VA-200-1,VA-200,3,90\nVA-200-2,VA-200,3,60\n",
    )
    .map_err(|e| e.to_string())?;
    let va = va.to_str().unwrap();
    let commands: Vec<Vec<&str>> = vec![
        vec!["allocate", "--input", va, "--eps-total", "3"],
        vec![
            "allocate",
            "--input",
            va,
            "--tau",
            "100",
            "--weights",
            "1,2,3",
        ],
        vec!["allocate", "--synth", "wyoming", "--eps-total", "1"],
        vec!["release", "--input", va, "--eps-total", "1", "--seed", "7"],
        vec![
            "release",
            "--synth",
            "6:5-40",
            "--eps-total",
            "0.5",
            "--hier",
            "--seed",
            "3",
        ],
        vec![
            "evaluate",
            "--synth",
            "4:5-30",
            "--replicates",
            "200",
            "--eps-grid",
            "0.5,1",
            "--w3-grid",
            "0.2,0.5",
        ],
        vec![
            "downstream",
            "--counts",
            "500,200,100,50,50,30,30,20,10,10",
            "--eps-total",
            "1",
            "--replicates",
            "2000",
        ],
        vec![
            "downstream",
            "--synth",
            "3:4-8",
            "--tract",
            "s.1",
            "--eps-total",
            "1",
            "--replicates",
            "1000",
            "--weight-fns",
            "log,quadratic",
        ],
        vec![
            "skew",
            "--total",
            "30",
            "--regions",
            "3",
            "--eps-grid",
            "0.1,0.5",
        ],
    ];
    let mut checked = 0;
    for (i, args) in commands.iter().enumerate() {
        let reference = run_cli(args, "1", None)?;
        ensure(!reference.is_empty(), || format!("{args:?}: empty output"))?;
        for (threads, env) in [("1", None), ("4", None), ("3", Some("2"))] {
            let again = run_cli(args, threads, env)?;
            ensure(again == reference, || {
                format!("{args:?}: stdout differs with --threads {threads} env {env:?}")
            })?;
            checked += 1;
        }
        // the same command writing into an output directory
        let mut dirs = Vec::new();
        for threads in ["1", "4"] {
            let d = tmp.path().join(format!("out-{i}-{threads}"));
            let mut with_out = args.clone();
            let ds = d.to_str().unwrap().to_string();
            with_out.extend(["--out", ds.as_str()]);
            run_cli(&with_out, threads, None)?;
            dirs.push(outputs_in(&d));
        }
        ensure(!dirs[0].is_empty() && dirs[0] == dirs[1], || {
            format!("{args:?}: --out files differ")
        })?;
        checked += 1;
    }
    Ok(format!(
        "{} commands, {checked} comparisons byte-identical",
        commands.len()
    ))
}

fn log_vs_linear_note() -> String {
    let counts = [
        500.0, 200.0, 100.0, 50.0, 50.0, 30.0, 30.0, 20.0, 10.0, 10.0,
    ];
    let recipe = DownstreamRecipe::new(tract_hierarchy("tract", &counts).unwrap(), 1.0);
    let rep = run_downstream(
        &recipe,
        &[WeightFunction::Log, WeightFunction::Linear],
        10_000,
        0,
    )
    .unwrap();
    let g = |w| rep.gap(w).map(|g| (g.mse_gap, g.mse_gap_se)).unwrap();
    let rel = |w| {
        let u = rep.row(w, Arm::Uniform).unwrap().mse_pct;
        g(w).0 / u
    };
    format!(
        "note: uniform-optimal misallocation gap log {:.4}±{:.4} vs linear {:.4}±{:.4} (relative {:.1}% vs {:.1}%)",
        g(WeightFunction::Log).0,
        g(WeightFunction::Log).1,
        g(WeightFunction::Linear).0,
        g(WeightFunction::Linear).1,
        100.0 * rel(WeightFunction::Log),
        100.0 * rel(WeightFunction::Linear),
    )
}

fn main() {
    let criteria: [Criterion; 13] = [
        (
            "closed-form bias and variance vs Monte Carlo",
            c1_closed_form,
        ),
        ("exact trivial values", c2_trivial_values),
        ("mse bounds", c3_bounds),
        ("convexity in eps", c4_convexity),
        ("fixed-budget solver optimality", c5_solver_optimality),
        ("bottom-heavy allocations", c6_bottom_heavy),
        ("target-mse self-consistency", c7_target_mse),
        ("projection vs active-set oracle", c8_projection),
        ("optimized vs uniform on wyoming-like data", c9_wyoming),
        ("weight ablation", c10_weight_ablation),
        ("skewness minimality", c11_skewness),
        ("downstream misallocation", c12_downstream),
        ("cli determinism", c13_determinism),
    ];
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    if wanted.is_empty() || wanted.contains(&12) {
        println!("{}", log_vs_linear_note());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
