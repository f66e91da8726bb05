use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;

use regseg_core::datasets::{
    generate_synthetic_dataset, save_dataset, split_train_val_test, SyntheticSpec,
};

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory (will contain train/, val/, test/).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub image_size: usize,
    #[arg(long, default_value_t = 4)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 200)]
    pub num_samples: usize,
    /// Gaussian blur of class boundaries, in pixels.
    #[arg(long, default_value_t = 1.5)]
    pub blur_sigma: f64,
    /// Additive Gaussian pixel noise std, fraction of dynamic range.
    #[arg(long, default_value_t = 0.08)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overwrite an existing non-empty output directory.
    #[arg(long, default_value_t = false)]
    pub force: bool,
}

pub fn run(args: GenerateArgs) -> Result<()> {
    if args.out.exists() {
        let non_empty = std::fs::read_dir(&args.out)
            .with_context(|| format!("inspecting {}", args.out.display()))?
            .next()
            .is_some();
        if non_empty && !args.force {
            bail!(
                "output directory {} is not empty (pass --force to overwrite)",
                args.out.display()
            );
        }
    }

    let spec = SyntheticSpec {
        image_size: args.image_size,
        num_classes: args.num_classes,
        num_samples: args.num_samples,
        boundary_blur_sigma: args.blur_sigma,
        intensity_noise_std: args.noise_std,
        seed: args.seed,
    };
    let samples = generate_synthetic_dataset(&spec)?;
    let (train, val, test) = split_train_val_test(samples, spec.seed);

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    save_dataset(&args.out.join("train"), &train)?;
    save_dataset(&args.out.join("val"), &val)?;
    save_dataset(&args.out.join("test"), &test)?;
    let spec_path = args.out.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&spec)?)
        .with_context(|| format!("writing {}", spec_path.display()))?;

    // summary statistics
    let mut class_counts = vec![0u64; spec.num_classes];
    for sample in train.iter().chain(&val).chain(&test) {
        for &v in sample.label.as_ref().expect("generated labels").iter() {
            class_counts[v as usize] += 1;
        }
    }
    let total: u64 = class_counts.iter().sum();
    println!(
        "dataset written to {}: {} train / {} val / {} test ({}x{} px, {} classes, seed {})",
        args.out.display(),
        train.len(),
        val.len(),
        test.len(),
        spec.image_size,
        spec.image_size,
        spec.num_classes,
        spec.seed
    );
    for (c, count) in class_counts.iter().enumerate() {
        println!(
            "  class {c}: {:.2}% of pixels",
            100.0 * *count as f64 / total as f64
        );
    }
    Ok(())
}
