use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use regseg_core::metrics::evaluate;
use regseg_core::model::load_network;

use super::{check_class_compat, DatasetDirs};
use crate::report::print_metrics_table;

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Network checkpoint (.net file from a train run).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    /// Which split to evaluate.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Optional path for the MetricsRecord JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: EvalArgs) -> Result<()> {
    let dirs = DatasetDirs::new(&args.data)?;
    let samples = dirs.load_split(&args.split)?;
    let (net, step) = load_network(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    check_class_compat(net.config().num_classes, &samples)?;

    let record = evaluate(&net, &samples, net.config().num_classes)?;
    println!(
        "checkpoint {} (step {step}) on split {} ({} samples):",
        args.checkpoint.display(),
        args.split,
        record.n_samples
    );
    print_metrics_table(&record);

    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&record)?)
            .with_context(|| format!("writing {}", out.display()))?;
        println!("metrics written to {}", out.display());
    }
    Ok(())
}
