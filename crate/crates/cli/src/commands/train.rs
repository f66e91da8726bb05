use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use regseg_core::metrics::{evaluate, MetricsRecord};
use regseg_core::model::save_network;
use regseg_core::training::{checkpoint::checkpoint_save, run_pipeline, LogRecord, TrainConfig};

use super::{check_unique_ids, effective_config, ConfigOverlay, DatasetDirs};
use crate::report::print_metrics_table;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root (as written by generate-data).
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for config, checkpoints, logs, and reports.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overlay: ConfigOverlay,
}

#[derive(Serialize)]
struct RunReport<'a> {
    config: &'a TrainConfig,
    test_student: MetricsRecord,
    test_teacher: MetricsRecord,
    n_labeled: usize,
    n_unlabeled: usize,
    wall_seconds: f64,
}

pub fn write_jsonl(path: &std::path::Path, records: &[LogRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    for record in records {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn run(args: TrainArgs) -> Result<()> {
    // fail before any compute if the dataset is missing
    let dirs = DatasetDirs::new(&args.data)?;
    let cfg = effective_config(args.config.as_deref(), &args.overlay)?;
    cfg.validate()?;

    let train_pool = dirs.load_split("train")?;
    check_unique_ids(&train_pool)?;
    let test_pool = dirs.load_split("test")?;

    std::fs::create_dir_all(args.out.join("checkpoints"))
        .with_context(|| format!("creating {}", args.out.display()))?;
    std::fs::create_dir_all(args.out.join("figures"))?;

    // effective config, logged verbatim, sufficient to reproduce the run
    let config_path = args.out.join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&cfg)?)
        .with_context(|| format!("writing {}", config_path.display()))?;

    let t0 = Instant::now();
    let out = run_pipeline(&train_pool, &cfg)?;

    // split manifest persisted alongside the dataset and in the run dir
    let manifest_name = format!(
        "split-ratio{:.4}-seed{}.json",
        cfg.labeled_ratio, cfg.seed
    );
    out.manifest.save(&args.data.join(&manifest_name))?;
    out.manifest.save(&args.out.join("split.json"))?;

    let mut logs = out.pretrain_logs.clone();
    logs.extend(out.semi_logs.iter().cloned());
    write_jsonl(&args.out.join("metrics.jsonl"), &logs)?;
    for record in &logs {
        if let Some(warning) = &record.warning {
            eprintln!("warning: {warning}");
        }
    }

    let ckpt = args.out.join("checkpoints");
    save_network(
        &out.pretrained_teacher,
        cfg.pretrain_iters as u64,
        &ckpt.join("teacher_pretrained.net"),
    )?;
    save_network(&out.state.student, out.state.step, &ckpt.join("student_final.net"))?;
    save_network(&out.state.teacher, out.state.step, &ckpt.join("teacher_final.net"))?;
    checkpoint_save(&out.state, &cfg, &ckpt.join("train_state.ckpt"))?;

    let test_student = evaluate(&out.state.student, &test_pool, cfg.net.num_classes)?;
    let test_teacher = evaluate(&out.state.teacher, &test_pool, cfg.net.num_classes)?;
    let report = RunReport {
        config: &cfg,
        test_student: test_student.clone(),
        test_teacher: test_teacher.clone(),
        n_labeled: out.manifest.labeled_ids.len(),
        n_unlabeled: out.manifest.unlabeled_ids.len(),
        wall_seconds: t0.elapsed().as_secs_f64(),
    };
    std::fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;

    println!(
        "run complete in {:.1}s ({} labeled / {} unlabeled)",
        report.wall_seconds, report.n_labeled, report.n_unlabeled
    );
    println!("test metrics (student):");
    print_metrics_table(&test_student);
    println!("test metrics (teacher):");
    print_metrics_table(&test_teacher);
    println!("artifacts in {}", args.out.display());
    Ok(())
}
