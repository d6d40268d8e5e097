//! `hierdp` command line.
//!
//! Every command is a pure function of its input files, flags and seed;
//! `--threads` changes wall time only.

mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::allocator::AllocError;
use crate::downstream::DownstreamError;
use crate::harness::HarnessError;
use crate::hierarchy::HierarchyError;
use crate::release::ReleaseError;
use crate::skew::SkewError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CONVERGENCE: i32 = 4;

pub const THREADS_ENV: &str = "HIERDP_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "hierdp",
    version,
    about = "Privacy budget allocation for hierarchical count releases"
)]
pub struct Cli {
    /// Worker threads (0 = all cores). HIERDP_THREADS takes precedence.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Choose per-level budgets.
    Allocate(AllocateArgs),
    /// Publish one noisy copy of the hierarchy.
    Release(ReleaseArgs),
    /// Compare optimized and uniform budgets by Monte Carlo.
    Evaluate(EvaluateArgs),
    /// Misallocation of weighted budget shares within one tract.
    Downstream(DownstreamArgs),
    /// Closed-form clamp bias over splits of a fixed total.
    Skew(SkewArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct Source {
    /// Hierarchy CSV with columns node_id,parent_id,level,count.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Synthetic hierarchy: `wyoming` or per-level fanouts such as `4:5-30`.
    #[arg(long)]
    pub synth: Option<String>,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed for `--synth` hierarchies.
    #[arg(long, default_value_t = 0)]
    pub synth_seed: u64,
    /// Hierarchy CSV whose counts drive the allocation (defaults to the input).
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Write results into this directory instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct Budget {
    /// Total budget to split across levels.
    #[arg(long)]
    pub eps_total: Option<f64>,
    /// Target weighted MSE; the smallest total budget reaching it is used.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    #[command(flatten)]
    pub source: Source,
    #[command(flatten)]
    pub budget: Budget,
    /// Per-level weights, comma separated (default: all ones).
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReleaseArgs {
    #[command(flatten)]
    pub source: Source,
    #[command(flatten)]
    pub budget: Budget,
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Enforce parent/child consistency after noising.
    #[arg(long)]
    pub hier: bool,
    /// Budget used for levels the allocator leaves at zero (0 = withhold).
    #[arg(long, default_value_t = 0.0)]
    pub eps_floor: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub source: Source,
    /// Total budgets to compare at.
    #[arg(long, value_delimiter = ',', default_values_t = crate::harness::DEFAULT_EPS_GRID)]
    pub eps_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1000)]
    pub replicates: usize,
    /// Also sweep the last-level weight over these values.
    #[arg(long, value_delimiter = ',')]
    pub w3_grid: Option<Vec<f64>>,
    /// Total budget for the weight sweep.
    #[arg(long, default_value_t = 1.0)]
    pub sweep_eps: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct DownstreamArgs {
    /// Hierarchy CSV; see `--tract` and `--counts`.
    #[arg(long, conflicts_with = "synth")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub synth: Option<String>,
    /// Run on the subtree rooted at this node of the input.
    #[arg(long, conflicts_with = "counts")]
    pub tract: Option<String>,
    /// Block counts of a single tract, comma separated (replaces the input).
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["input", "synth"])]
    pub counts: Option<Vec<f64>>,
    #[arg(long)]
    pub eps_total: f64,
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "log,linear,quadratic")]
    pub weight_fns: Vec<String>,
    #[arg(long, default_value_t = 10_000)]
    pub replicates: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SkewArgs {
    #[arg(long, default_value_t = 100)]
    pub total: u64,
    #[arg(long, default_value_t = 2)]
    pub regions: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.5")]
    pub eps_grid: Vec<f64>,
    /// Explicit splits such as `50;50,100;0` (default: every split).
    #[arg(long, value_delimiter = ',')]
    pub splits: Option<Vec<String>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Convergence(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Data(_) | Self::Io { .. } => EXIT_DATA,
            Self::Convergence(_) => EXIT_CONVERGENCE,
        }
    }
}

impl From<HierarchyError> for CliError {
    fn from(e: HierarchyError) -> Self {
        match e {
            HierarchyError::InvalidSpec(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<AllocError> for CliError {
    fn from(e: AllocError) -> Self {
        match e {
            AllocError::ConvergenceFailure { .. } => Self::Convergence(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<ReleaseError> for CliError {
    fn from(e: ReleaseError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Alloc(a) => a.into(),
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<DownstreamError> for CliError {
    fn from(e: DownstreamError) -> Self {
        match e {
            DownstreamError::Alloc(a) => a.into(),
            DownstreamError::Hierarchy(h) => h.into(),
            DownstreamError::InvalidCounts(_) | DownstreamError::ZeroTotal => {
                Self::Data(e.to_string())
            }
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<SkewError> for CliError {
    fn from(e: SkewError) -> Self {
        Self::Usage(e.to_string())
    }
}

/// Thread count after applying the environment override.
fn thread_count(flag: usize) -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a thread count"))),
        _ => Ok(flag),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(stdout, "{}", e.render());
            return EXIT_OK;
        }
    };
    let result = thread_count(cli.threads).and_then(|threads| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {threads} threads: {e}")))?;
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let r = pool.install(|| commands::dispatch(&cli.command, &mut out, &mut err));
        let _ = stderr.write_all(&err);
        r?;
        stdout
            .write_all(&out)
            .and_then(|_| stdout.flush())
            .map_err(|source| CliError::Io {
                path: "<stdout>".into(),
                source,
            })
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
