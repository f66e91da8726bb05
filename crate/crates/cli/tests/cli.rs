//! End-to-end tests of the `regseg` binary: every subcommand, the run
//! directory layout, config precedence, and the documented error exits.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn regseg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_regseg"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = regseg().args(args).output().expect("spawn regseg");
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str]) -> String {
    let out = regseg().args(args).output().expect("spawn regseg");
    assert!(
        !out.status.success(),
        "command {:?} unexpectedly succeeded",
        args
    );
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    // machine-parsable single line
    assert!(
        stderr.lines().count() <= 2 && stderr.starts_with("error: "),
        "stderr not a one-line error: {stderr:?}"
    );
    stderr
}

fn generate_tiny(dir: &Path, seed: u64) -> PathBuf {
    let data = dir.join(format!("data-{seed}"));
    run_ok(&[
        "generate-data",
        "--out",
        data.to_str().unwrap(),
        "--image-size",
        "32",
        "--num-samples",
        "24",
        "--blur-sigma",
        "1.0",
        "--noise-std",
        "0.05",
        "--seed",
        &seed.to_string(),
    ]);
    data
}

const TINY_TRAIN_FLAGS: &[&str] = &[
    "--labeled-ratio",
    "0.25",
    "--pretrain-iters",
    "4",
    "--semi-iters",
    "4",
    "--batch-labeled",
    "2",
    "--batch-unlabeled",
    "2",
    "--base-width",
    "4",
    "--depth",
    "2",
    "--seed",
    "3",
];

fn dir_fingerprint(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(current) = stack.pop() {
        for entry in std::fs::read_dir(&current).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                entries.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    entries.sort();
    entries
}

#[test]
fn generate_data_is_deterministic_and_layout_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let a = generate_tiny(tmp.path(), 7);
    for split in ["train", "val", "test"] {
        assert!(a.join(split).join("manifest.json").exists(), "{split} missing");
    }
    assert!(a.join("spec.json").exists());

    let b_dir = tmp.path().join("data-again");
    run_ok(&[
        "generate-data",
        "--out",
        b_dir.to_str().unwrap(),
        "--image-size",
        "32",
        "--num-samples",
        "24",
        "--blur-sigma",
        "1.0",
        "--noise-std",
        "0.05",
        "--seed",
        "7",
    ]);
    assert_eq!(dir_fingerprint(&a), dir_fingerprint(&b_dir));
}

#[test]
fn generate_data_rejects_bad_flags_and_nonempty_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_tiny(tmp.path(), 1);

    let err = run_err(&[
        "generate-data",
        "--out",
        data.to_str().unwrap(),
        "--num-classes",
        "1",
    ]);
    assert!(err.contains("not empty"), "unexpected: {err}");

    let fresh = tmp.path().join("fresh");
    let err = run_err(&[
        "generate-data",
        "--out",
        fresh.to_str().unwrap(),
        "--num-classes",
        "1",
    ]);
    assert!(err.contains("num_classes"), "unexpected: {err}");
}

#[test]
fn train_writes_run_directory_and_respects_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_tiny(tmp.path(), 2);
    let run_dir = tmp.path().join("run");

    // config file says alpha = 0.3; the flag must win
    let cfg_file = tmp.path().join("cfg.toml");
    std::fs::write(&cfg_file, "alpha = 0.3\nq_sup = 90.0\n").unwrap();

    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--config",
        cfg_file.to_str().unwrap(),
        "--alpha",
        "0.7",
    ];
    args.extend_from_slice(TINY_TRAIN_FLAGS);
    run_ok(&args);

    for artifact in [
        "config.json",
        "metrics.jsonl",
        "report.json",
        "split.json",
        "checkpoints/teacher_pretrained.net",
        "checkpoints/student_final.net",
        "checkpoints/teacher_final.net",
        "checkpoints/train_state.ckpt",
    ] {
        assert!(run_dir.join(artifact).exists(), "{artifact} missing");
    }
    assert!(run_dir.join("figures").is_dir());

    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(config["alpha"], 0.7); // flag beat the file
    assert_eq!(config["q_sup"], 90.0); // file beat the default

    // split manifest persisted alongside the dataset as well
    assert!(data.join("split-ratio0.2500-seed3.json").exists());

    // metrics log: one JSON object per iteration
    let lines = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 8); // 4 pretrain + 4 semi
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss_total"].is_number());
    }
}

#[test]
fn train_fails_fast_without_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let err = run_err(&[
        "train",
        "--data",
        tmp.path().join("nope").to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert!(err.contains("manifest.json"), "unexpected: {err}");
}

#[test]
fn eval_prints_table_and_writes_json() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_tiny(tmp.path(), 4);
    let run_dir = tmp.path().join("run");
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY_TRAIN_FLAGS);
    run_ok(&args);

    let ckpt = run_dir.join("checkpoints/teacher_final.net");
    let json_out = tmp.path().join("metrics.json");
    let out = run_ok(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "test",
        "--out",
        json_out.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Dice^"), "missing table header: {stdout}");
    assert!(stdout.contains("mean"));
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json_out).unwrap()).unwrap();
    assert!(record["mean"]["dice"].is_number());
}

#[test]
fn visualize_exports_figures_with_consistent_densities() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_tiny(tmp.path(), 5);
    let run_dir = tmp.path().join("run");
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY_TRAIN_FLAGS);
    run_ok(&args);

    let figures = tmp.path().join("figs");
    run_ok(&[
        "visualize",
        "--checkpoint",
        run_dir.join("checkpoints/teacher_final.net").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        figures.to_str().unwrap(),
        "--percentiles",
        "95,97,99",
        "--samples",
        "2",
    ]);

    let annotations: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(figures.join("annotations.json")).unwrap())
            .unwrap();
    let samples = annotations.as_array().unwrap();
    assert_eq!(samples.len(), 2);
    for sample in samples {
        for key in ["input_file", "entropy_file", "pseudo_file"] {
            let file = sample[key].as_str().unwrap();
            assert!(figures.join(file).exists(), "{file} missing");
        }
        let masks = sample["masks"].as_array().unwrap();
        assert_eq!(masks.len(), 3);
        for mask in masks {
            let file = mask["file"].as_str().unwrap();
            let q = mask["q"].as_f64().unwrap();
            let density = mask["density"].as_f64().unwrap();

            // recount from the exported overlay: pure red pixels are mask=1
            let img = image::open(figures.join(file)).unwrap().to_rgb8();
            let red = img.pixels().filter(|p| p.0 == [255, 0, 0]).count();
            let total = (img.width() * img.height()) as f64;
            let recounted = red as f64 / total;
            assert!(
                (recounted - density).abs() < 1e-9,
                "{file}: annotation {density} vs recount {recounted}"
            );
            // strict-threshold rule: density never exceeds (100-q)% by more
            // than one pixel's worth; ties only shrink it
            assert!(density <= (100.0 - q) / 100.0 + 1.0 / total + 1e-12);
        }
    }
}

#[test]
fn visualize_rejects_class_count_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_tiny(tmp.path(), 6);
    let run_dir = tmp.path().join("run");
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--num-classes",
        "3",
    ];
    args.extend_from_slice(TINY_TRAIN_FLAGS);
    // training itself rejects labels out of range for a 3-class net
    let err = run_err(&args);
    assert!(err.contains("label") || err.contains("class"), "unexpected: {err}");

    // so train a proper 4-class net, then point visualize at 6-class data
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY_TRAIN_FLAGS);
    run_ok(&args);

    let other = tmp.path().join("data6");
    run_ok(&[
        "generate-data",
        "--out",
        other.to_str().unwrap(),
        "--image-size",
        "32",
        "--num-samples",
        "12",
        "--num-classes",
        "6",
        "--seed",
        "1",
    ]);
    let err = run_err(&[
        "visualize",
        "--checkpoint",
        run_dir.join("checkpoints/teacher_final.net").to_str().unwrap(),
        "--data",
        other.to_str().unwrap(),
        "--out",
        tmp.path().join("figs2").to_str().unwrap(),
    ]);
    assert!(err.contains("classes"), "unexpected: {err}");
}

#[test]
fn ablate_runs_grid_and_report_matches_run_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_tiny(tmp.path(), 8);
    let plan_path = tmp.path().join("plan.toml");
    std::fs::write(
        &plan_path,
        format!(
            r#"
name = "tiny-module-ablation"
data = "{}"
seeds = [1, 2]
model = "teacher"

[base]
labeled_ratio = 0.25
pretrain_iters = 3
semi_iters = 3
batch_labeled = 2
batch_unlabeled = 2

[base.net]
base_width = 4
depth = 2

[[grid]]
label = "base"
[grid.overrides]
url_on = false
crl_on = false

[[grid]]
label = "both"
"#,
            data.display()
        ),
    )
    .unwrap();

    let out_dir = tmp.path().join("ablation");
    let out = run_ok(&[
        "ablate",
        "--plan",
        plan_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("tiny-module-ablation"));
    assert!(stdout.contains("base"));
    assert!(stdout.contains("both"));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2);

    // report cells must equal re-aggregation of the per-run result files
    for cell in cells {
        let label = cell["label"].as_str().unwrap();
        let mut dices = Vec::new();
        for seed in [1, 2] {
            let result: serde_json::Value = serde_json::from_str(
                &std::fs::read_to_string(
                    out_dir
                        .join("runs")
                        .join(format!("{label}-seed{seed}"))
                        .join("result.json"),
                )
                .unwrap(),
            )
            .unwrap();
            assert_eq!(result["ok"], true);
            dices.push(result["teacher"]["mean"]["dice"].as_f64().unwrap());
        }
        let mean = dices.iter().sum::<f64>() / dices.len() as f64;
        let got = cell["mean_dice"].as_f64().unwrap();
        assert!((got - mean).abs() < 1e-9, "{label}: {got} vs {mean}");
    }

    // per-run artifacts exist
    assert!(out_dir.join("runs/base-seed1/config.json").exists());
    assert!(out_dir.join("runs/base-seed1/metrics.jsonl").exists());
    assert!(out_dir.join("report.txt").exists());
}
