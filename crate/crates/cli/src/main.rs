//! `regseg` command-line interface.

mod commands;
mod overlay;
mod report;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "regseg",
    about = "Semi-supervised segmentation with entropy-based region weighting",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train/val/test splits.
    GenerateData(commands::generate::GenerateArgs),
    /// Pretrain the teacher and run semi-supervised training.
    Train(commands::train::TrainArgs),
    /// Evaluate a network checkpoint on a dataset split.
    Eval(commands::eval::EvalArgs),
    /// Run an ablation plan (grid of config overrides x seeds).
    Ablate(commands::ablate::AblateArgs),
    /// Export entropy heatmaps, percentile-mask overlays, and pseudo-label
    /// error maps for a checkpoint.
    Visualize(commands::visualize::VisualizeArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData(args) => commands::generate::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Ablate(args) => commands::ablate::run(args),
        Command::Visualize(args) => commands::visualize::run(args),
    };
    if let Err(err) = result {
        // single machine-parsable line
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
