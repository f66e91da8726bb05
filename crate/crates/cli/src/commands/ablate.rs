use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use regseg_core::datasets::Sample;
use regseg_core::metrics::{evaluate, MetricsRecord};
use regseg_core::training::{run_pipeline, TrainConfig};

use super::{check_unique_ids, ConfigOverlay, DatasetDirs};
use crate::commands::train::write_jsonl;

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// TOML plan file (dataset, seeds, grid of overrides).
    #[arg(long)]
    pub plan: PathBuf,
    /// Output directory for the report and per-run artifacts.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    #[default]
    Student,
    Teacher,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Plan {
    name: String,
    /// Dataset root, relative to the plan file's directory when not absolute.
    data: PathBuf,
    seeds: Vec<u64>,
    #[serde(default)]
    model: EvalModel,
    #[serde(default)]
    base: TrainConfig,
    grid: Vec<GridPoint>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridPoint {
    label: String,
    #[serde(default)]
    overrides: ConfigOverlay,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub student: Option<MetricsRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<MetricsRecord>,
    pub wall_seconds: f64,
}

#[derive(Debug, Serialize)]
struct CellSummary {
    label: String,
    n_ok: usize,
    n_failed: usize,
    mean_dice: Option<f64>,
    std_dice: Option<f64>,
    mean_jaccard: Option<f64>,
    mean_hd95: Option<f64>,
    mean_asd: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Report {
    plan_name: String,
    model: EvalModel,
    seeds: Vec<u64>,
    cells: Vec<CellSummary>,
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() == 1 {
        return (Some(mean), Some(0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (Some(mean), Some(var.sqrt()))
}

fn run_one(
    cfg: &TrainConfig,
    train_pool: &[Sample],
    test_pool: &[Sample],
    run_dir: &Path,
) -> Result<(MetricsRecord, MetricsRecord)> {
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(
        run_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;
    let out = run_pipeline(train_pool, cfg)?;
    let mut logs = out.pretrain_logs;
    logs.extend(out.semi_logs);
    write_jsonl(&run_dir.join("metrics.jsonl"), &logs)?;
    let student = evaluate(&out.state.student, test_pool, cfg.net.num_classes)?;
    let teacher = evaluate(&out.state.teacher, test_pool, cfg.net.num_classes)?;
    Ok((student, teacher))
}

/// Re-aggregate cell summaries from the per-run JSON files on disk, so the
/// report always equals what the artifacts imply.
fn aggregate_cell(label: &str, runs_dir: &Path, seeds: &[u64], model: EvalModel) -> Result<CellSummary> {
    let mut dices = Vec::new();
    let mut jaccards = Vec::new();
    let mut hds = Vec::new();
    let mut asds = Vec::new();
    let mut n_ok = 0;
    let mut n_failed = 0;
    for seed in seeds {
        let path = runs_dir.join(format!("{label}-seed{seed}")).join("result.json");
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        let result: RunResult = serde_json::from_str(&text)?;
        if !result.ok {
            n_failed += 1;
            continue;
        }
        n_ok += 1;
        let record = match model {
            EvalModel::Student => result.student,
            EvalModel::Teacher => result.teacher,
        }
        .context("missing metrics in result.json")?;
        dices.push(record.mean.dice);
        jaccards.push(record.mean.jaccard);
        if let Some(h) = record.mean.hd95 {
            hds.push(h);
        }
        if let Some(a) = record.mean.asd {
            asds.push(a);
        }
    }
    let (mean_dice, std_dice) = mean_std(&dices);
    let (mean_jaccard, _) = mean_std(&jaccards);
    let (mean_hd95, _) = mean_std(&hds);
    let (mean_asd, _) = mean_std(&asds);
    Ok(CellSummary {
        label: label.to_string(),
        n_ok,
        n_failed,
        mean_dice,
        std_dice,
        mean_jaccard,
        mean_hd95,
        mean_asd,
    })
}

pub fn run(args: AblateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.plan)
        .with_context(|| format!("reading plan {}", args.plan.display()))?;
    let plan: Plan = toml::from_str(&text)
        .with_context(|| format!("parsing plan {}", args.plan.display()))?;

    if plan.seeds.is_empty() {
        bail!("plan has no seeds");
    }
    let mut labels: Vec<&str> = plan.grid.iter().map(|g| g.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() != plan.grid.len() {
        bail!("grid labels must be unique (each grid point gets its own run directory)");
    }

    let data_root = if plan.data.is_absolute() {
        plan.data.clone()
    } else {
        args.plan
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&plan.data)
    };
    let dirs = DatasetDirs::new(&data_root)?;
    let train_pool = dirs.load_split("train")?;
    check_unique_ids(&train_pool)?;
    let test_pool = dirs.load_split("test")?;

    let runs_dir = args.out.join("runs");
    std::fs::create_dir_all(&runs_dir)?;

    for point in &plan.grid {
        for &seed in &plan.seeds {
            let mut cfg = plan.base.clone();
            point.overrides.apply(&mut cfg);
            cfg.seed = seed;
            cfg.net.seed = seed;

            let run_dir = runs_dir.join(format!("{}-seed{seed}", point.label));
            let t0 = Instant::now();
            let outcome = run_one(&cfg, &train_pool, &test_pool, &run_dir);
            let result = match outcome {
                Ok((student, teacher)) => RunResult {
                    seed,
                    ok: true,
                    error: None,
                    student: Some(student),
                    teacher: Some(teacher),
                    wall_seconds: t0.elapsed().as_secs_f64(),
                },
                Err(err) => {
                    eprintln!("warning: run {}-seed{seed} failed: {err:#}", point.label);
                    RunResult {
                        seed,
                        ok: false,
                        error: Some(format!("{err:#}")),
                        student: None,
                        teacher: None,
                        wall_seconds: t0.elapsed().as_secs_f64(),
                    }
                }
            };
            std::fs::create_dir_all(&run_dir)?;
            std::fs::write(
                run_dir.join("result.json"),
                serde_json::to_string_pretty(&result)?,
            )?;
            println!(
                "{}-seed{seed}: {} ({:.0}s)",
                point.label,
                result
                    .student
                    .as_ref()
                    .map(|r| format!("dice {:.2}", r.mean.dice))
                    .unwrap_or_else(|| "FAILED".into()),
                result.wall_seconds
            );
        }
    }

    let mut cells = Vec::new();
    for point in &plan.grid {
        cells.push(aggregate_cell(&point.label, &runs_dir, &plan.seeds, plan.model)?);
    }
    let report = Report {
        plan_name: plan.name.clone(),
        model: plan.model,
        seeds: plan.seeds.clone(),
        cells,
    };
    std::fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;

    let mut table = String::new();
    table.push_str(&format!(
        "{} ({:?}, seeds {:?})\n{:<16} {:>14} {:>10} {:>10} {:>10}\n",
        plan.name, plan.model, plan.seeds, "variant", "Dice^", "Jaccard^", "95HD v", "ASD v"
    ));
    for cell in &report.cells {
        let dice = match (cell.mean_dice, cell.std_dice) {
            (Some(m), Some(s)) => format!("{m:.2} +- {s:.2}"),
            _ => "failed".into(),
        };
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |v| format!("{v:.2}"));
        table.push_str(&format!(
            "{:<16} {:>14} {:>10} {:>10} {:>10}\n",
            cell.label,
            dice,
            opt(cell.mean_jaccard),
            opt(cell.mean_hd95),
            opt(cell.mean_asd),
        ));
        if cell.n_failed > 0 {
            table.push_str(&format!("  ({} of {} runs failed)\n", cell.n_failed, plan.seeds.len()));
        }
    }
    std::fs::write(args.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}
