use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

/// Meal dataset construction, training and evaluation.
#[derive(Parser, Debug)]
#[command(name = "mealrec", version)]
struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for reports and default outputs.
    #[arg(long, global = true, env = "MEALREC_REPORT_DIR")]
    report_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic recipe catalogue and review log.
    Synth(SynthArgs),
    /// Build meals and user-meal interactions from recipes and reviews.
    Build(BuildArgs),
    /// Print dataset statistics.
    Stats(StatsArgs),
    /// Train a model on a leave-one-out training split.
    Train(TrainArgs),
    /// Evaluate a checkpoint with HR@K and NDCG@K.
    Eval(EvalArgs),
    /// Train and evaluate all four model variants.
    Ablate(TrainArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub users: usize,
    #[arg(long)]
    pub recipes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub min_events: Option<usize>,
    #[arg(long)]
    pub max_events: Option<usize>,
    #[arg(long)]
    pub tag_vocab: Option<usize>,
    #[arg(long)]
    pub positive_rate: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub recipes: Option<PathBuf>,
    #[arg(long)]
    pub reviews: Option<PathBuf>,
    #[arg(long)]
    pub meals: Option<PathBuf>,
    #[arg(long)]
    pub user_meal: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Where meal.csv and user_meal.csv are written; defaults to the report directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub time_window_days: Option<i64>,
    #[arg(long)]
    pub max_attempts: Option<usize>,
    #[arg(long)]
    pub k_core: Option<usize>,
    #[arg(long)]
    pub threshold: Option<u8>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub threshold: Option<u8>,
}

#[derive(Args, Debug)]
pub struct HyperArgs {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub l: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub negatives_per_positive: Option<usize>,
    #[arg(long)]
    pub holdout_fraction: Option<f64>,
    #[arg(long)]
    pub train_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub negatives_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    /// CCMR, MW, CW or MW-F (ignored by ablate).
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Distinguishes bad invocations (exit 2) from failed runs (exit 1).
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub fn usage<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg: RunConfig = usage(RunConfig::load(cli.config.as_deref()))?;
    if let Some(dir) = cli.report_dir {
        cfg.paths.report_dir = Some(dir);
    }
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Build(a) => commands::build(cfg, &a),
        Command::Stats(a) => commands::stats(cfg, &a),
        Command::Train(a) => commands::train(cfg, &a),
        Command::Eval(a) => commands::eval(cfg, &a),
        Command::Ablate(a) => commands::ablate(cfg, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
