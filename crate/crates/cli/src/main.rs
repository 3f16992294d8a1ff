mod commands;
mod image;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mexflow::Error;

/// Matrix-exponential normalizing flows.
#[derive(Parser, Debug)]
#[command(name = "mexflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a flow and write metrics and checkpoints.
    Train(TrainArgs),
    /// Report NLL (and bits/dim for images) of a checkpoint.
    Eval(EvalArgs),
    /// Draw samples as an image grid or CSV points.
    Sample(SampleArgs),
    /// Check invertibility and log-determinants layer by layer.
    Audit(AuditArgs),
    /// Statistics of the matexp cost coefficient m.
    BenchMatexp(BenchArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset: moons, rings, checkerboard, or a .csv/.bin/IDX file.
    #[arg(long)]
    data: Option<String>,
    /// Output directory for metrics.csv and checkpoint.mef.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// affine, matexp or matexp-lowrank.
    #[arg(long)]
    coupling: Option<String>,
    /// matexp, standard or plu.
    #[arg(long)]
    conv: Option<String>,
    /// Points drawn from a generated dataset.
    #[arg(long, default_value_t = 5000)]
    count: usize,
    /// Train once per listed coupling and print a comparison table.
    #[arg(long, value_delimiter = ',')]
    compare: Vec<String>,
    /// Extra `key=value` overrides, applied after the named flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = 5000)]
    count: usize,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Output file: .pgm/.ppm for image models, .csv for points.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[arg(long, conflicts_with = "random_config", required_unless_present = "random_config")]
    ckpt: Option<PathBuf>,
    /// Audit a freshly built small model instead of a checkpoint.
    #[arg(long)]
    random_config: bool,
    /// Config file for --random-config.
    #[arg(long, requires = "random_config")]
    config: Option<PathBuf>,
    /// Inputs pushed through the model.
    #[arg(long, default_value_t = 4)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Target 1-norms.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,1,1.5")]
    norms: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failures that map to the process exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Audit(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::ConfigMismatch(_)
            | Error::InvalidArgument { .. }
            | Error::ShapeMismatch { .. }
            | Error::NotInitialized(_) => CliError::Usage(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sample(a) => commands::sample(a),
        Command::Audit(a) => commands::audit(a),
        Command::BenchMatexp(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Audit(msg)) => {
            eprintln!("audit failed: {msg}");
            ExitCode::from(3)
        }
    }
}
