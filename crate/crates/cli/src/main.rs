//! `stereoqa`: synthetic data, naturalness features, training, evaluation
//! and prediction for stereo image pairs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "stereoqa", version, about = "No-reference quality prediction for stereo image pairs")]
struct Cli {
    /// More log output on stderr (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic stereo dataset and its manifest.
    Synth(SynthArgs),
    /// Compute the 108 naturalness features of every manifest sample.
    ExtractNss(ExtractArgs),
    /// Train one network per split run.
    Train(TrainArgs),
    /// Score the held-out subsets of a training directory.
    Evaluate(EvaluateArgs),
    /// Print the predicted score of one stereo pair.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory (receives manifest.csv and images/).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    contents: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    /// Severity levels, comma-separated, increasing within 1..=5.
    #[arg(long, value_delimiter = ',', default_values_t = [1u8, 2, 3, 4, 5])]
    levels: Vec<u8>,
    /// Distortion tags, comma-separated (synth-blur, synth-awgn, synth-quant).
    #[arg(long, value_delimiter = ',')]
    distortions: Vec<String>,
    /// Also emit pairs whose views carry different levels.
    #[arg(long)]
    asymmetric: bool,
    /// Replace an existing dataset.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Feature file (`id,v1..v108` per line).
    #[arg(long)]
    out: PathBuf,
    /// Recompute samples already present in the output.
    #[arg(long)]
    force: bool,
    /// Parallel workers.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InitArg {
    Uniform,
    Normal,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Feature file from `extract-nss`; required unless --no-aux.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Output directory (splits.csv and runNN/ subdirectories).
    #[arg(long)]
    out: PathBuf,
    /// Use these splits instead of generating them.
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 25.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Disable the auxiliary feature-prediction task.
    #[arg(long)]
    no_aux: bool,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Single)]
    precision: PrecisionArg,
    #[arg(long, value_enum, default_value_t = InitArg::Uniform)]
    init: InitArg,
    #[arg(long, default_value_t = 1.0)]
    init_gain: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace existing run directories.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SubsetArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    train_dir: PathBuf,
    /// Feature file; adds an `nss-features` RMSE row.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SubsetArg::Test)]
    subset: SubsetArg,
    /// Map scores through a fitted 4-parameter logistic before the metrics.
    #[arg(long)]
    logistic: bool,
    /// Report file (default: <train-dir>/report.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::ExtractNss(a) => commands::extract_nss(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Predict(a) => commands::predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(1)
        }
    }
}
