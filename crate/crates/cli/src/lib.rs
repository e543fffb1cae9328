//! Operator commands behind the `seed` binary.
//!
//! Every command writes its report to a caller-supplied writer and maps its
//! outcome to a process exit code, so the binary is a thin wrapper and tests
//! can drive commands in-process.

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use commands::{cmd_eval, cmd_oracle_check, cmd_replay, cmd_train, oracle_report, OracleReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("numeric halt: {0}")]
    Numeric(String),
    #[error("{0}")]
    Failed(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Mismatch(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
            _ => EXIT_FAILURE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "seed", version, about = "Train and evaluate skill agents from evaluative feedback")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one training job into a fresh run directory.
    Train(TrainArgs),
    /// Roll out a saved policy deterministically.
    Eval(EvalArgs),
    /// Re-run a finished oracle run and compare its metrics byte for byte.
    Replay(ReplayArgs),
    /// Roll the scripted oracle's own solution and check it is approved and succeeds.
    OracleCheck(OracleArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// reaching | stacking | sweeping | collecting-toy | cooking-hotdog
    #[arg(long)]
    pub task: Option<String>,
    /// oracle | oracle-q | human | env | env-aff
    #[arg(long)]
    pub feedback: Option<String>,
    /// Decision-step budget.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file with `TrainConfig` keys; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Address for the operator gateway (required with `--feedback human`).
    #[arg(long, value_name = "ADDR")]
    pub serve: Option<String>,
    /// Console assets served by the gateway.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    /// Run directory; defaults to `runs/<task>-<mode>-s<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Teacher checkpoint for `--feedback oracle-q`.
    #[arg(long)]
    pub oracle_checkpoint: Option<PathBuf>,
    /// Also dump the final replay buffer as `buffer.jsonl`.
    #[arg(long)]
    pub save_buffer: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Json,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Checkpoint manifest (`.json`) written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Task to evaluate on; defaults to the checkpoint's own.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub rollouts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Run directory holding `manifest.json` and `metrics.jsonl`.
    pub run: PathBuf,
    /// Where to write the re-run; a temporary directory by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    /// One task, or `all`.
    #[arg(long, default_value = "all")]
    pub task: String,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long, default_value_t = seed_core::feedback::DEFAULT_TAU_OK)]
    pub tau_ok: f64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Replay(a) => cmd_replay(&a, out),
        Command::OracleCheck(a) => cmd_oracle_check(&a, out),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return e.exit_code();
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
