mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ernn_core::training::TrainingError;

use commands::{BenchArgs, EnhanceArgs, EvaluateArgs, GradcheckArgs, SynthArgs};
use config::{ModelArgs, TrainArgs};

/// Causal ERNN speech enhancement: training, offline and streaming
/// inference, diagnostics.
#[derive(Debug, Parser)]
#[command(name = "ernn", version)]
struct Cli {
    /// JSON config file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for batch parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a mask estimator on paired noisy/clean audio.
    Train(TrainArgs),
    /// Enhance a WAV file with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Print exact and rounded parameter counts.
    Params(ModelArgs),
    /// Finite-difference check of the end-to-end loss gradient.
    Gradcheck(GradcheckArgs),
    /// Real-time factor and state-gradient norm traces.
    Bench(BenchArgs),
    /// SI-SDR and segmental SNR of a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Write a synthetic noisy/clean dataset.
    Synth(SynthArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<TrainingError>() {
                Some(TrainingError::DatasetNotFound(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let file = match &cli.config {
        Some(p) => config::FileConfig::load(p)?,
        None => config::FileConfig::default(),
    };
    if let Some(n) = cli.threads.or(file.threads) {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let out = commands::Output::new(cli.out);
    match cli.command {
        Command::Train(a) => commands::train(&a, &file, &out),
        Command::Enhance(a) => commands::enhance(&a, &out),
        Command::Params(a) => commands::params(&a, &file, &out),
        Command::Gradcheck(a) => commands::gradcheck(&a, &file, &out),
        Command::Bench(a) => commands::bench(&a, &file, &out),
        Command::Evaluate(a) => commands::evaluate(&a, &out),
        Command::Synth(a) => commands::synth(&a, &file, &out),
    }
}
