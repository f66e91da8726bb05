pub mod ablate;
pub mod eval;
pub mod generate;
pub mod train;
pub mod visualize;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use regseg_core::datasets::{load_dataset, Sample};
use regseg_core::training::{EmaConvention, RegionStrategy, TrainConfig};
use regseg_core::uncertainty::PercentileScope;

/// Optional overrides of [`TrainConfig`], shared between CLI flags and the
/// grid points of an ablation plan. Precedence: defaults < config file <
/// these overrides.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigOverlay {
    #[arg(long)]
    pub q_sup: Option<f64>,
    #[arg(long)]
    pub q_unsup: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub labeled_ratio: Option<f64>,
    #[arg(long)]
    pub pretrain_iters: Option<usize>,
    #[arg(long)]
    pub semi_iters: Option<usize>,
    #[arg(long)]
    pub batch_labeled: Option<usize>,
    #[arg(long)]
    pub batch_unlabeled: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub ema_cap: Option<f64>,
    #[arg(long, value_parser = parse_ema_convention)]
    pub ema_convention: Option<EmaConvention>,
    #[arg(long, value_parser = parse_scope)]
    pub percentile_scope: Option<PercentileScope>,
    #[arg(long)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub url_on: Option<bool>,
    #[arg(long)]
    pub crl_on: Option<bool>,
    #[arg(long)]
    pub remove_unreliable: Option<bool>,
    #[arg(long)]
    pub freeze_pseudo_labels: Option<bool>,
    #[arg(long, value_parser = parse_strategy)]
    pub region_strategy_labeled: Option<RegionStrategy>,
    #[arg(long, value_parser = parse_strategy)]
    pub region_strategy_unlabeled: Option<RegionStrategy>,
}

fn parse_strategy(s: &str) -> Result<RegionStrategy, String> {
    match s.to_ascii_lowercase().as_str() {
        "url" => Ok(RegionStrategy::Url),
        "crl" => Ok(RegionStrategy::Crl),
        other => Err(format!("unknown strategy `{other}` (expected url|crl)")),
    }
}

fn parse_ema_convention(s: &str) -> Result<EmaConvention, String> {
    match s.to_ascii_lowercase().as_str() {
        "standard" => Ok(EmaConvention::Standard),
        "paper" => Ok(EmaConvention::Paper),
        other => Err(format!("unknown convention `{other}` (expected standard|paper)")),
    }
}

fn parse_scope(s: &str) -> Result<PercentileScope, String> {
    match s.to_ascii_lowercase().as_str() {
        "batch" => Ok(PercentileScope::Batch),
        "per_image" | "per-image" => Ok(PercentileScope::PerImage),
        other => Err(format!("unknown scope `{other}` (expected batch|per_image)")),
    }
}

impl ConfigOverlay {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set! {
            q_sup => cfg.q_sup,
            q_unsup => cfg.q_unsup,
            alpha => cfg.alpha,
            labeled_ratio => cfg.labeled_ratio,
            pretrain_iters => cfg.pretrain_iters,
            semi_iters => cfg.semi_iters,
            batch_labeled => cfg.batch_labeled,
            batch_unlabeled => cfg.batch_unlabeled,
            lr => cfg.lr,
            momentum => cfg.momentum,
            ema_cap => cfg.ema_cap,
            ema_convention => cfg.ema_convention,
            percentile_scope => cfg.percentile_scope,
            augment => cfg.augment,
            seed => cfg.seed,
            base_width => cfg.net.base_width,
            depth => cfg.net.depth,
            num_classes => cfg.net.num_classes,
            url_on => cfg.ablation.url_on,
            crl_on => cfg.ablation.crl_on,
            remove_unreliable => cfg.ablation.remove_unreliable,
            freeze_pseudo_labels => cfg.ablation.freeze_pseudo_labels,
            region_strategy_labeled => cfg.ablation.region_strategy_labeled,
            region_strategy_unlabeled => cfg.ablation.region_strategy_unlabeled,
        }
        // keep the network seeded from the run seed unless a config file
        // pinned it separately
        if let Some(seed) = self.seed {
            cfg.net.seed = seed;
        }
    }
}

/// Resolve the effective config: defaults, then an optional TOML file, then
/// flag/grid overrides.
pub fn effective_config(file: Option<&Path>, overlay: &ConfigOverlay) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    // CLI default backbone: small enough for CPU runs
    cfg.net.base_width = 8;
    cfg.net.depth = 3;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        cfg = toml::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))?;
    }
    overlay.apply(&mut cfg);
    Ok(cfg)
}

/// The three dataset split directories.
pub struct DatasetDirs {
    pub root: PathBuf,
}

impl DatasetDirs {
    pub fn new(root: &Path) -> Result<DatasetDirs> {
        if !root.join("train").join("manifest.json").exists() {
            bail!(
                "dataset path {} has no train/manifest.json (run generate-data first)",
                root.display()
            );
        }
        Ok(DatasetDirs { root: root.into() })
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<Sample>> {
        let dir = self.root.join(split);
        let samples = load_dataset(&dir)
            .with_context(|| format!("loading dataset split {}", dir.display()))?;
        if samples.is_empty() {
            bail!("dataset split {} is empty", dir.display());
        }
        Ok(samples)
    }
}

/// Number of classes implied by the labels in a sample list.
pub fn infer_num_classes(samples: &[Sample]) -> Option<usize> {
    samples
        .iter()
        .filter_map(|s| s.label.as_ref())
        .flat_map(|l| l.iter().copied())
        .max()
        .map(|m| m as usize + 1)
}

/// Error out when the checkpoint's class count cannot cover the labels.
pub fn check_class_compat(net_classes: usize, samples: &[Sample]) -> Result<()> {
    if let Some(need) = infer_num_classes(samples) {
        if need > net_classes {
            bail!(
                "checkpoint predicts {net_classes} classes but the dataset labels need {need}"
            );
        }
    }
    Ok(())
}

/// Distinct ids sanity check for loaded splits.
pub fn check_unique_ids(samples: &[Sample]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in samples {
        if !seen.insert(&s.id) {
            bail!("duplicate sample id {} in dataset", s.id);
        }
    }
    Ok(())
}
