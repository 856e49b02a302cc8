//! `massflow` command-line entry point.

mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use massflow::Error;
use overrides::Override;

#[derive(Debug, Parser)]
#[command(name = "massflow", version, about = "Per-frame mass regression from run-level totals")]
struct Cli {
    /// Worker threads for generation and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded, bit-reproducible mode.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with hidden per-frame masses.
    Gen(GenArgs),
    /// Train a network on a dataset's train split.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or supplied predictions) on a split.
    Eval(EvalArgs),
    /// Fit and evaluate the volume-density baseline.
    Baseline(BaselineArgs),
    /// Grad-cam heatmaps and feature similarity for a checkpoint.
    Explain(ExplainArgs),
    /// Aggregate evaluation reports and training histories.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Scenario proportions, e.g. `steady=0.5,ramp=0.5`.
    #[arg(long)]
    pub mix: Option<String>,
    /// Scene config JSON file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Split ratios `train,val,test`.
    #[arg(long, default_value = "0.6,0.2,0.2")]
    pub ratios: String,
    /// Do not spread zero-mass runs across splits.
    #[arg(long)]
    pub no_stratify_empty: bool,
    /// Also write point clouds for the baseline.
    #[arg(long)]
    pub clouds: bool,
    /// Config override `key=value`; `cloud.` keys set point-cloud options.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<Override>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Preset name, JSON file or inline JSON.
    #[arg(long, default_value = "res9er")]
    pub arch: String,
    #[arg(long)]
    pub activation: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `constant` or `cosine`.
    #[arg(long)]
    pub lr_schedule: Option<String>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub penalty_target: Option<String>,
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub precision: Option<String>,
    /// Training config JSON file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also keep a checkpoint every K epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Config override `key=value`; `arch.` keys edit the architecture.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<Override>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// JSON object mapping run ids to per-frame raw predictions.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, default_value_t = 3.0)]
    pub threshold_sigma: f64,
    /// Also compare per-frame predictions with the hidden oracle masses.
    #[arg(long)]
    pub oracle_diagnostics: bool,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// Directory with `index.csv` and per-run volume CSVs.
    #[arg(long, required_unless_present = "clouds", conflicts_with = "clouds")]
    pub volumes: Option<PathBuf>,
    /// Point-cloud archive directory.
    #[arg(long)]
    pub clouds: Option<PathBuf>,
    /// Dataset whose split labels choose fit and evaluation runs.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    pub fit_split: String,
    #[arg(long, default_value = "test")]
    pub eval_split: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Override `fit.` or `bin.` options.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<Override>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Convolutional stage id: `stem` or `blockK`.
    #[arg(long)]
    pub layer: String,
    /// Run archive directory.
    #[arg(long)]
    pub run: PathBuf,
    /// Frame indices, comma separated.
    #[arg(long, default_value = "0", value_delimiter = ',')]
    pub frames: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also compare the layer's maps with each other.
    #[arg(long)]
    pub similarity: bool,
    #[arg(long, default_value_t = 0.9)]
    pub min_score: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation output directories (one per seed).
    #[arg(long = "eval", num_args = 1..)]
    pub evals: Vec<PathBuf>,
    /// `history.jsonl` files to compare.
    #[arg(long = "history", num_args = 1..)]
    pub histories: Vec<PathBuf>,
    /// Train-loss level for the epochs-to-threshold table.
    #[arg(long)]
    pub loss_threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::NotFound(_) | Error::UnknownLayer(_) | Error::UnsupportedLayer(_) => 2,
        Error::Numeric { .. } => 4,
        Error::CorruptArchive(_)
        | Error::Domain(_)
        | Error::Dimension(_)
        | Error::Protocol(_)
        | Error::Io { .. }
        | Error::Json(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not set thread count: {e}");
        }
    }
    let result = match cli.cmd {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Baseline(a) => commands::baseline(&a),
        Command::Explain(a) => commands::explain(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
