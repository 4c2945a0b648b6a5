//! `infomtl`: generate data, train, evaluate, stress-test, diagnose and
//! report multi-task representation learning experiments.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "infomtl", version, about)]
struct Cli {
    /// Root directory for outputs whose location is not given explicitly.
    #[arg(long, global = true, env = "INFOMTL_OUT", default_value = "runs")]
    out_root: PathBuf,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-task dataset on disk.
    GenData(GenDataArgs),
    /// Train one model and write its run directory.
    Train(Box<TrainArgs>),
    /// Run every configuration of an experiment manifest over its seeds.
    Suite(SuiteArgs),
    /// Score a trained run on a split.
    Eval(EvalArgs),
    /// Score a trained run under input perturbations.
    Robustness(RobustnessArgs),
    /// Representation diagnostics of a trained run.
    Diagnose(DiagnoseArgs),
    /// Consolidate run summaries or a score sheet into a score table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Generator configuration (JSON); defaults to the 6-task suite.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: <out-root>/data].
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Dataset selection shared by the commands that need data.
#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset manifest written by `gen-data`.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Synthetic generator configuration to build the dataset in memory.
    #[arg(long)]
    synthetic: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Training configuration (JSON); flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training method, e.g. infomtl, ew, uw, pcgrad.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    data_fraction: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    diagnostic_every: Option<usize>,
    /// Encoder hidden widths, comma separated (empty for none).
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    repr_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Run directory [default: <out-root>/<name>/seed<seed>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SuiteArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Maximum number of concurrent runs.
    #[arg(long)]
    jobs: Option<usize>,
    /// Run everything on the calling thread.
    #[arg(long)]
    sequential: bool,
    /// Experiment directory [default: manifest output_dir or <out-root>/<name>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Gaussian,
    Fgm,
    Both,
}

#[derive(Debug, Args)]
struct RobustnessArgs {
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "both")]
    kind: KindArg,
    /// Perturbation L2 norms, comma separated; must include 0.
    #[arg(long, value_delimiter = ',')]
    strengths: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory for the CSVs [default: the run directory].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[arg(long)]
    run: PathBuf,
    /// Seed of the k-means restarts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory [default: the run directory].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directories, or directories containing them.
    runs: Vec<PathBuf>,
    /// Score sheet `method,<task>...` to verify Avg and Δp arithmetic.
    #[arg(long, conflicts_with = "runs")]
    score_sheet: Option<PathBuf>,
    /// Method row that Δp is measured against [default: the ew runs].
    #[arg(long)]
    reference: Option<String>,
    /// Output directory [default: <out-root>/report].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
