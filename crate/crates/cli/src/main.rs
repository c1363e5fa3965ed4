//! `formertime` command-line interface.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use formertime::Error;

#[derive(Parser, Debug)]
#[command(
    name = "formertime",
    version,
    about = "Hierarchical transformer for multivariate time-series classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate over one or more seeds.
    Train(TrainArgs),
    /// Sweep one configuration axis with all else fixed.
    Ablate(AblateArgs),
    /// Finite-difference check of every parameter gradient.
    Gradcheck(GradcheckArgs),
    /// Analytic multiply-accumulate counts.
    Macs(MacsArgs),
    /// Write pooled representations of a dataset as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_file: Option<PathBuf>,
    #[arg(long)]
    test_file: Option<PathBuf>,
    /// Synthetic task: multiscale-motif, order-motif or longrange.
    #[arg(long)]
    synth: Option<String>,
    /// Number of seeds (0..N) or a comma-separated list.
    #[arg(long)]
    seeds: Option<String>,
    /// Dotted override, e.g. `stage1.slice.s=16`; repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Save each seed's final parameters in the run directory.
    #[arg(long)]
    save_checkpoint: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Stages,
    Slice,
    Pos,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    axis: Axis,
    /// Restrict the sweep, e.g. `none,contextual`, `1,3` or `16-32-64,2-4-8`.
    #[arg(long)]
    values: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Model to check; defaults to the small two-stage model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long, default_value_t = 32)]
    length: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
}

#[derive(Args, Debug)]
struct MacsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Input length.
    #[arg(long)]
    length: usize,
    /// Input channels; defaults to the config's.
    #[arg(long)]
    channels: Option<usize>,
    /// Print the attention score+context cost of each stage against R=1.
    #[arg(long)]
    compare_r: bool,
    /// Print the breakdown as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// `.ts` file to embed.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic task to embed (its test split).
    #[arg(long)]
    synth: Option<String>,
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

/// Failures mapped to exit codes: usage problems 2, everything else 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Usage(_) | Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn one_line(msg: &str) -> String {
    msg.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Macs(a) => commands::macs(&a),
        Command::ExportEmbeddings(a) => commands::export_embeddings(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error[usage]: {}", one_line(&msg));
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error[runtime]: {}", one_line(&msg));
            ExitCode::from(1)
        }
    }
}
