//! `pfod` command-line tool: synthetic data, training runs, evaluation and
//! overlays.

mod config;
mod manifest;
mod overlay;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit status: 0 success, 1 other failure, 2 config error, 3 data error,
/// 4 numerical divergence.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, error: error.into() }
    }

    pub fn data(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 3, error: error.into() }
    }

    pub fn other(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 1, error: error.into() }
    }

    /// Divergence maps to 4, anything else to `fallback`.
    pub fn from_core(e: pfod::Error, fallback: u8) -> Self {
        let code = if matches!(e, pfod::Error::Divergence { .. }) { 4 } else { fallback };
        Self { code, error: e.into() }
    }
}

pub type CliResult<T> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "pfod", version, about = "Object counting from a few exemplar boxes per image")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark: PGM images plus annotation files.
    Generate(GenerateArgs),
    /// Train (od) or propagate labels and train (pfod), then evaluate.
    Run(RunArgs),
    /// Recompute metrics from saved predictions or a checkpoint.
    Evaluate(EvaluateArgs),
    /// Draw predictions over images with per-image count sidecars.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Scene spec JSON; the built-in default when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training scenes, listed in train.jsonl.
    #[arg(long)]
    pub count: usize,
    /// Object-free images, listed in background.jsonl.
    #[arg(long, default_value_t = 0)]
    pub background_count: usize,
    /// Held-out scenes, listed in test.jsonl.
    #[arg(long, default_value_t = 0)]
    pub test_count: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Od,
    Pfod,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Od => "od",
            Mode::Pfod => "pfod",
        }
    }
}

#[derive(Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Override a config key, e.g. `--set schedule.num_stages=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; overrides the config and PFOD_OUTPUT_ROOT.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Ground-truth annotation file.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Predictions JSON Lines, as written by `run`.
    #[arg(long, required_unless_present = "model", conflicts_with = "model")]
    pub predictions: Option<PathBuf>,
    /// Checkpoint to predict with.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Evaluation settings JSON (match_iou, score_floor, nms_iou,
    /// counting_grid, test_area).
    #[arg(long)]
    pub eval_config: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Lowest score drawn and counted.
    #[arg(long)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub nms_iou: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => run::generate(&a),
        Command::Run(a) => run::run(&a),
        Command::Evaluate(a) => run::evaluate(&a),
        Command::Visualize(a) => run::visualize(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
