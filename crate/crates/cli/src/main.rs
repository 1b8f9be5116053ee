mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use manf_core::data::SynthKind;
use manf_core::ManfError;

/// Probabilistic multivariate forecasting with multi-scale attention flows.
#[derive(Debug, Parser)]
#[command(name = "manf", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic series CSV.
    Synth(SynthArgs),
    /// Train from a run config; writes checkpoint, history and config echo.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset, optionally under stress corruption.
    Evaluate(EvaluateArgs),
    /// Sample a forecast and write quantiles (and SVG charts).
    Forecast(ForecastArgs),
    /// Retrain and score once per value of one hyperparameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = parse_kind, default_value = "sinusoid-mix")]
    pub kind: SynthKind,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub dims: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Observation noise (innovation scale for random-walk and ar1).
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Relative amplitude of a weekly harmonic (sinusoid-mix only).
    #[arg(long, default_value_t = 0.0)]
    pub weekly: f64,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config JSON.
    pub config: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct Scoring {
    /// Rolling evaluation windows from the tail.
    #[arg(long, default_value_t = 7)]
    pub windows: usize,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Divide CRPS-sum by the mean absolute summed target.
    #[arg(long)]
    pub normalized: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub scoring: Scoring,
    /// Forecast this many times the trained horizon (context scales along).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub horizon_mult: u64,
    /// Fraction of context cells dropped at random.
    #[arg(long, default_value_t = 0.0)]
    pub missing: f64,
    #[arg(long, default_value_t = 0)]
    pub corruption_seed: u64,
    /// Also write the report here.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Row of the first forecast step; defaults to the last `horizon` rows.
    #[arg(long)]
    pub start: Option<usize>,
    /// Output directory for `quantiles.csv` and charts.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Emit one SVG chart per selected series.
    #[arg(long)]
    pub plot: bool,
    /// Series to chart (default: all).
    #[arg(long, value_delimiter = ',')]
    pub series: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SweepParam {
    BatchSize,
    Lr,
    Layers,
    HiddenDim,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long, short)]
    pub out: PathBuf,
}

fn parse_kind(s: &str) -> Result<SynthKind, String> {
    s.parse().map_err(|e: ManfError| e.to_string())
}

/// A failed command and its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

pub const EXIT_IO: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_USAGE: u8 = 64;
pub const EXIT_DATA: u8 = 65;

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, msg: msg.into() }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_IO, msg: msg.into() }
    }
}

impl From<ManfError> for Failure {
    fn from(e: ManfError) -> Self {
        use ManfError::*;
        let code = match &e {
            Io(_) | Csv(_) | Checksum { .. } => EXIT_IO,
            NonFinite { .. } | Singular(_) | Domain { .. } | Shape { .. } | Index { .. } | TableSize { .. } => {
                EXIT_NUMERIC
            }
            Contract(_) | Config { .. } | Json(_) => EXIT_USAGE,
            DataMismatch(_) | Format { .. } | Empty(_) | Coverage(_) | Incompatible(_) => EXIT_DATA,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.cmd {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Forecast(a) => commands::forecast(&a),
        Command::Sweep(a) => commands::sweep(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
