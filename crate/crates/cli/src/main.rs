//! `elsm` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime or I/O failure, 2 on bad usage or
//! configuration. Log verbosity follows `RUST_LOG` (default `info`).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "elsm", version, about = "Evolving latent space models for dynamic networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a synthetic dynamic network with ground-truth latents.
    Generate(GenerateArgs),
    /// Fit a model and write embeddings, a checkpoint and the training log.
    Train(TrainArgs),
    /// Detect communities per snapshot from trained embeddings.
    Cluster(ClusterArgs),
    /// Rolling next-snapshot link prediction.
    Linkpred(LinkpredArgs),
    /// AUC and max-F1 of a predicted probability matrix.
    EvalMetrics(EvalMetricsArgs),
    /// Turn a temporal edge list into a network snapshot file.
    Prepare(PrepareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantArg {
    Ielsm,
    Elsm,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    /// Generator configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Network snapshot file.
    #[arg(long)]
    pub data: PathBuf,
    /// Overrides the variant in the configuration.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Training configuration (JSON); defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint up to the configured epoch count.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ClusterArgs {
    /// Embeddings written by `train`; omit to run only the spectral baseline.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Network snapshot file the embeddings were trained on.
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub k_min: usize,
    #[arg(long, default_value_t = 10)]
    pub k_max: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also run normalized spectral clustering on the observed snapshots.
    #[arg(long)]
    pub spectral: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Bas,
}

#[derive(Debug, Args, Serialize)]
pub struct LinkpredArgs {
    /// Network snapshot file.
    #[arg(long)]
    pub data: PathBuf,
    /// Training configuration; without it only baselines run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub baselines: Vec<Baseline>,
    /// Number of trailing snapshots to predict (each from all earlier ones).
    #[arg(long, default_value_t = 3)]
    pub targets: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalMetricsArgs {
    /// Predicted probabilities as a JSON matrix.
    #[arg(long)]
    pub pred: PathBuf,
    /// Truth as a JSON matrix or a network snapshot file.
    #[arg(long)]
    pub truth: PathBuf,
    /// Snapshot of a network truth file to compare with (default: last).
    #[arg(long)]
    pub snapshot: Option<usize>,
    /// Write the metrics here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankArg {
    TotalWeight,
    UniqueNeighbors,
}

#[derive(Debug, Args, Serialize)]
pub struct PrepareArgs {
    /// Temporal edge list `t u v [w]`.
    #[arg(long)]
    pub edges: PathBuf,
    /// Window length in timestamp units.
    #[arg(long)]
    pub window: f64,
    /// Number of windows.
    #[arg(long)]
    pub count: usize,
    /// Window start; the earliest timestamp when absent.
    #[arg(long)]
    pub start: Option<f64>,
    /// Record presence instead of summed weights.
    #[arg(long)]
    pub binarize: bool,
    /// Keep only the top nodes by `rank-by`.
    #[arg(long)]
    pub top: Option<usize>,
    #[arg(long, value_enum, default_value = "total-weight")]
    pub rank_by: RankArg,
    /// Drop snapshots with fewer nonzero entries than this.
    #[arg(long)]
    pub min_nonzero: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Cluster(a) => commands::cluster(&a),
        Command::Linkpred(a) => commands::linkpred(&a),
        Command::EvalMetrics(a) => commands::eval_metrics(&a),
        Command::Prepare(a) => commands::prepare(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
