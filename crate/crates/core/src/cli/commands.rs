use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{
    AllocateArgs, Budget, CliError, Command, Common, DownstreamArgs, EvaluateArgs, ReleaseArgs,
    SkewArgs, Source,
};
use crate::allocator::{allocate_fixed_budget, allocate_target_mse, BudgetAllocation};
use crate::analytics::LevelWeights;
use crate::downstream::{run_downstream, tract_hierarchy, DownstreamRecipe, WeightFunction};
use crate::harness::{
    compare_allocations, comparison_plot_csv, sweep_csv, weight_sweep, ComparisonReport, SweepPoint,
};
use crate::hierarchy::{
    level_stats, parse_hierarchy, synth_hierarchy, Fanout, Hierarchy, LevelStats, SynthSpec,
};
use crate::release::{enforce_consistency, release_replicate, ReleaseOptions};
use crate::skew::{skew_csv, skewness_bias_curve};

const PRIOR_WARNING: &str =
    "warning: no --prior given, so budgets are chosen from the input counts. \
Publishing the resulting per-level budgets reveals information about those counts; \
release only the total budget, or pass previously published data with --prior.";

pub(super) fn dispatch(
    cmd: &Command,
    stdout: &mut Vec<u8>,
    stderr: &mut Vec<u8>,
) -> Result<(), CliError> {
    match cmd {
        Command::Allocate(a) => allocate(a, stdout, stderr),
        Command::Release(a) => release(a, stdout, stderr),
        Command::Evaluate(a) => evaluate(a, stdout, stderr),
        Command::Downstream(a) => downstream(a, stdout, stderr),
        Command::Skew(a) => skew(a, stdout),
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_csv(path: &Path) -> Result<Hierarchy, CliError> {
    parse_hierarchy(&read(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// `wyoming`, or colon-separated per-level fanouts (`k` or `lo-hi`).
fn parse_synth(spec: &str, seed: u64) -> Result<SynthSpec, CliError> {
    if spec.eq_ignore_ascii_case("wyoming") {
        return Ok(SynthSpec::wyoming_like(seed));
    }
    let bad = || {
        CliError::Usage(format!(
            "bad --synth {spec:?}; expected `wyoming` or fanouts like `4:5-30`"
        ))
    };
    let fanouts = spec
        .split(':')
        .map(|part| {
            let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
            match part.split_once('-') {
                Some((lo, hi)) => Ok(Fanout::range(num(lo)?, num(hi)?)),
                None => Ok(Fanout::fixed(num(part)?)),
            }
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(SynthSpec {
        fanouts,
        ..SynthSpec::wyoming_like(seed)
    })
}

fn load_source(
    input: Option<&PathBuf>,
    synth: Option<&String>,
    synth_seed: u64,
) -> Result<Hierarchy, CliError> {
    match (input, synth) {
        (Some(p), None) => load_csv(p),
        (None, Some(s)) => Ok(synth_hierarchy(&parse_synth(s, synth_seed)?)?),
        _ => Err(CliError::Usage(
            "give exactly one of --input or --synth".into(),
        )),
    }
}

fn source(s: &Source, c: &Common) -> Result<Hierarchy, CliError> {
    load_source(s.input.as_ref(), s.synth.as_ref(), c.synth_seed)
}

/// Prior hierarchy, or `None` (with the leakage warning) when absent.
fn prior_hierarchy(c: &Common, stderr: &mut Vec<u8>) -> Result<Option<Hierarchy>, CliError> {
    match &c.prior {
        Some(p) => Ok(Some(load_csv(p)?)),
        None => {
            let _ = writeln!(stderr, "{PRIOR_WARNING}");
            Ok(None)
        }
    }
}

fn prior_stats(c: &Common, h: &Hierarchy, stderr: &mut Vec<u8>) -> Result<LevelStats, CliError> {
    let stats = match prior_hierarchy(c, stderr)? {
        Some(p) => level_stats(&p),
        None => level_stats(h),
    };
    if stats.depth() != h.depth() {
        return Err(CliError::Data(format!(
            "prior has {} levels but the input has {}",
            stats.depth(),
            h.depth()
        )));
    }
    Ok(stats)
}

fn weights(w: &Option<Vec<f64>>, depth: usize) -> Result<LevelWeights, CliError> {
    match w {
        None => Ok(LevelWeights::equal(depth)),
        Some(v) if v.len() != depth => Err(CliError::Usage(format!(
            "--weights has {} values but the hierarchy has {depth} levels",
            v.len()
        ))),
        Some(v) => LevelWeights::new(v.clone()).map_err(|e| CliError::Usage(e.to_string())),
    }
}

fn budget(b: &Budget, stats: &LevelStats, w: &LevelWeights) -> Result<BudgetAllocation, CliError> {
    Ok(match (b.eps_total, b.tau) {
        (Some(e), None) => allocate_fixed_budget(stats, w, e)?,
        (None, Some(t)) => allocate_target_mse(stats, w, t)?,
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --eps-total or --tau".into(),
            ))
        }
    })
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Writes `content` to `dir/name`, or to stdout when no directory is given
/// and `primary` is set.
fn emit(
    dir: Option<&PathBuf>,
    name: &str,
    content: &str,
    primary: bool,
    stdout: &mut Vec<u8>,
) -> Result<(), CliError> {
    match dir {
        Some(d) => {
            let io = |source| CliError::Io {
                path: d.clone(),
                source,
            };
            std::fs::create_dir_all(d).map_err(io)?;
            let path = d.join(name);
            std::fs::write(&path, content).map_err(|source| CliError::Io { path, source })
        }
        None if primary => {
            stdout.extend_from_slice(content.as_bytes());
            Ok(())
        }
        None => Ok(()),
    }
}

fn allocate(a: &AllocateArgs, stdout: &mut Vec<u8>, stderr: &mut Vec<u8>) -> Result<(), CliError> {
    let h = source(&a.source, &a.common)?;
    let stats = prior_stats(&a.common, &h, stderr)?;
    let w = weights(&a.weights, h.depth())?;
    let alloc = budget(&a.budget, &stats, &w)?;
    emit(
        a.common.out.as_ref(),
        "allocation.json",
        &json(&alloc),
        true,
        stdout,
    )
}

fn release(a: &ReleaseArgs, stdout: &mut Vec<u8>, stderr: &mut Vec<u8>) -> Result<(), CliError> {
    let h = source(&a.source, &a.common)?;
    let stats = prior_stats(&a.common, &h, stderr)?;
    let w = weights(&a.weights, h.depth())?;
    let alloc = budget(&a.budget, &stats, &w)?;
    let options = ReleaseOptions {
        eps_floor: a.eps_floor,
    };
    let mut p = release_replicate(&h, &alloc, a.common.seed, 0, options)?;
    if a.hier {
        p = enforce_consistency(&p)?;
    }
    let out = a.common.out.as_ref();
    emit(out, "release.csv", &p.to_csv(), true, stdout)?;
    let mut sidecar = p.sidecar_json();
    sidecar.push('\n');
    emit(out, "release.json", &sidecar, false, stdout)
}

#[derive(Serialize)]
struct EvaluateReport {
    nodes: usize,
    depth: usize,
    seed: u64,
    comparisons: Vec<ComparisonReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_sweep: Option<Vec<SweepPoint>>,
}

fn evaluate(a: &EvaluateArgs, stdout: &mut Vec<u8>, stderr: &mut Vec<u8>) -> Result<(), CliError> {
    let h = source(&a.source, &a.common)?;
    let prior = prior_hierarchy(&a.common, stderr)?.map(|p| level_stats(&p));
    let w = weights(&a.weights, h.depth())?;
    let seed = a.common.seed;
    let comparisons = a
        .eps_grid
        .iter()
        .map(|&eps| compare_allocations(&h, prior.as_ref(), eps, &w, a.replicates, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let sweep = match &a.w3_grid {
        Some(grid) => Some(weight_sweep(
            &h,
            prior.as_ref(),
            a.sweep_eps,
            grid,
            0,
            seed,
        )?),
        None => None,
    };
    let out = a.common.out.as_ref();
    emit(
        out,
        "comparison.csv",
        &comparison_plot_csv(&comparisons),
        false,
        stdout,
    )?;
    if let Some(s) = &sweep {
        emit(out, "weight_sweep.csv", &sweep_csv(s), false, stdout)?;
    }
    let report = EvaluateReport {
        nodes: h.len(),
        depth: h.depth(),
        seed,
        comparisons,
        weight_sweep: sweep,
    };
    emit(out, "evaluate.json", &json(&report), true, stdout)
}

fn tract_of(h: Hierarchy, tract: Option<&String>) -> Result<Hierarchy, CliError> {
    match tract {
        None => Ok(h),
        Some(id) => match h.find(id) {
            Some(i) if !h.children(i).is_empty() => Ok(h.subtree(i)),
            Some(_) => Err(CliError::Usage(format!("node {id:?} has no children"))),
            None => Err(CliError::Data(format!(
                "node {id:?} is not in the hierarchy"
            ))),
        },
    }
}

fn downstream(
    a: &DownstreamArgs,
    stdout: &mut Vec<u8>,
    stderr: &mut Vec<u8>,
) -> Result<(), CliError> {
    let h = match &a.counts {
        Some(c) => tract_hierarchy("tract", c)?,
        None => tract_of(
            load_source(a.input.as_ref(), a.synth.as_ref(), a.common.synth_seed)?,
            a.tract.as_ref(),
        )?,
    };
    let weight_fns = a
        .weight_fns
        .iter()
        .map(|s| s.parse::<WeightFunction>())
        .collect::<Result<Vec<_>, _>>()?;
    let mut recipe = DownstreamRecipe::new(h, a.eps_total);
    recipe.weights = weights(&a.weights, recipe.hierarchy.depth())?;
    if let Some(p) = prior_hierarchy(&a.common, stderr)? {
        let p = tract_of(p, a.tract.as_ref())?;
        if p.depth() != recipe.hierarchy.depth() {
            return Err(CliError::Data(
                "prior tract depth differs from the input".into(),
            ));
        }
        recipe.prior = Some(level_stats(&p));
    }
    let report = run_downstream(&recipe, &weight_fns, a.replicates, a.common.seed)?;
    emit(
        a.common.out.as_ref(),
        "downstream.json",
        &json(&report),
        true,
        stdout,
    )
}

fn skew(a: &SkewArgs, stdout: &mut Vec<u8>) -> Result<(), CliError> {
    let splits = match &a.splits {
        Some(list) => Some(
            list.iter()
                .map(|s| {
                    s.split(';')
                        .map(|x| x.trim().parse::<u64>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| CliError::Usage(format!("bad split {s:?}")))
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    let points = skewness_bias_curve(a.total, a.regions, &a.eps_grid, splits.as_deref())?;
    emit(a.out.as_ref(), "skew.csv", &skew_csv(&points), true, stdout)
}
