//! `tokenhorizon` command line: train toy models, profile visual token
//! information, run the experiment sweeps and price pruning schedules.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tokenhorizon::harness::EXPERIMENT_IDS;
use tokenhorizon::Error;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_ASSERTION: u8 = 4;
pub const EXIT_FILE: u8 = 5;
pub const EXIT_EXISTS: u8 = 6;

#[derive(Parser, Debug, Clone)]
#[command(name = "tokenhorizon", version, about = "Visual token information horizon toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "TOKENHORIZON_OUT", default_value = "results")]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Train a toy model from a recipe.
    Train(TrainArgs),
    /// Write a task dataset file.
    GenData(GenDataArgs),
    /// Per-token information profile and horizon of a checkpoint.
    Profile(ProfileArgs),
    /// Run one experiment.
    Sweep(SweepArgs),
    /// Analytic FLOPs and KV-cache cost of pruning schedules.
    Flops(FlopsArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Recipe preset: default, small, large or lookup.
    #[arg(long, default_value = "default")]
    pub preset: String,
    /// Recipe TOML file; overrides --preset.
    #[arg(long)]
    pub recipe: Option<PathBuf>,
    /// lookup, majority or mixed.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// single or double.
    #[arg(long)]
    pub precision: Option<String>,
    /// Output file stem; defaults to the recipe name.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset file written by `gen-data`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Use the held-out split of this task from the standard recipes.
    #[arg(long, default_value = "lookup")]
    pub task: String,
    /// Data seed of the standard recipes.
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    #[arg(long, default_value = "lookup")]
    pub task: String,
    #[arg(long, default_value_t = 4)]
    pub grid_side: usize,
    #[arg(long, default_value_t = 4)]
    pub colors: usize,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 200)]
    pub heldout: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output file stem; `<stem>.train.data` and `<stem>.heldout.data`.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct ProfileArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = tokenhorizon::information::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = tokenhorizon::information::DEFAULT_PERSISTENCE)]
    pub persistence: usize,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    /// Experiment id.
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(EXPERIMENT_IDS))]
    pub id: String,
    /// Checkpoint; `capacity` takes two or more, smallest first.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// Sweep config TOML.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// `withdraw` only: also sweep the majority task.
    #[arg(long)]
    pub both_tasks: bool,
}

#[derive(Args, Debug, Clone)]
pub struct FlopsArgs {
    /// llava-7b or qwen25vl-7b.
    #[arg(long, default_value = "llava-7b")]
    pub arch: String,
    /// Architecture TOML file; overrides --arch.
    #[arg(long)]
    pub arch_file: Option<PathBuf>,
    /// Schedule preset names.
    #[arg(long, default_values_t = vec!["none".to_string()])]
    pub schedule: Vec<String>,
    /// Schedule TOML files, priced after the presets.
    #[arg(long)]
    pub schedule_file: Vec<PathBuf>,
    /// Text tokens; calibrated to the published baseline when omitted.
    #[arg(long)]
    pub n_text: Option<usize>,
    #[arg(long, default_value_t = tokenhorizon::efficiency::LLAVA_VISUAL_TOKENS)]
    pub n_visual: usize,
    #[arg(long, default_value_t = 2)]
    pub bytes_per_element: u64,
    /// Fail unless every pruned schedule cuts FLOPs by this percentage...
    #[arg(long)]
    pub expect_reduction: Option<f64>,
    /// ...within this many percentage points.
    #[arg(long, default_value_t = 10.0)]
    pub tolerance: f64,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// Errors a command can end with, mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Usage(String),
    Assertion(String),
    Exists(PathBuf),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_CONFIG,
            CliError::Assertion(_) => EXIT_ASSERTION,
            CliError::Exists(_) => EXIT_EXISTS,
            CliError::Core(e) => match e {
                Error::NonFinite { .. } | Error::Diverged { .. } => EXIT_NUMERIC,
                Error::File { .. } | Error::Io(_) => EXIT_FILE,
                Error::Csv(_) => EXIT_OTHER,
                _ => EXIT_CONFIG,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Assertion(m) => write!(f, "check failed: {m}"),
            CliError::Exists(p) => write!(f, "{} exists; pass --force to overwrite", p.display()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    match commands::run(cli, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
