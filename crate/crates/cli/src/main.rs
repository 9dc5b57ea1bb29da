use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Pre-train and fine-tune block-tokenized transformers on spectral curves.
#[derive(Debug, Parser)]
#[command(name = "curvebert", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic labeled dataset CSV.
    Generate(GenerateArgs),
    /// Pre-train on the training split and save the best checkpoint.
    Pretrain(RunArgs),
    /// Fine-tune a classifier, optionally from a pre-trained checkpoint.
    Finetune(FinetuneArgs),
    /// Score an existing fine-tuned checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Train every grid combination and rank by validation weighted F1.
    Gridsearch(GridArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Class spec TOML; the built-in 12-class spec when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite an existing file.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run configuration TOML.
    #[arg(long)]
    config: PathBuf,
    /// Overrides both training-loop seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; beats `[report] out` and `$CURVEBERT_OUT`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Validate the configuration and print the parameter count only.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Pre-trained checkpoint; trains from scratch when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Repeat with consecutive seeds and report mean and variance.
    #[arg(long)]
    repeat: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Fine-tuned checkpoint to score.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

/// A problem with the user's input rather than with the run itself.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use curvebert::Error as E;
    if err.downcast_ref::<Invalid>().is_some() {
        return 1;
    }
    match err.downcast_ref::<E>() {
        Some(
            E::Config(_)
            | E::Parse { .. }
            | E::Compatibility(_)
            | E::Variant { .. }
            | E::Partition { .. }
            | E::Label { .. }
            | E::Data(_)
            | E::Split { .. }
            | E::Pairing(_)
            | E::Imbalance { .. },
        ) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Gridsearch(a) => commands::gridsearch(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
