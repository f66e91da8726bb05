use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use regseg_core::datasets::image_batch;
use regseg_core::metrics::{error_recall_within_mask, pseudo_label_error_map};
use regseg_core::model::load_network;
use regseg_core::region::generate_pseudo_labels;
use regseg_core::uncertainty::{entropy_map, region_mask, PercentileScope};

use super::{check_class_compat, DatasetDirs};
use crate::overlay;

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    /// Network checkpoint (.net file).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for figures and annotations.
    #[arg(long)]
    pub out: PathBuf,
    /// Split to visualize.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated entropy percentiles for the mask overlays.
    #[arg(long, default_value = "95,97,99", value_delimiter = ',')]
    pub percentiles: Vec<f64>,
    /// How many samples to export.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
}

#[derive(Serialize)]
struct MaskAnnotation {
    q: f64,
    file: String,
    threshold: f64,
    density: f64,
    /// Fraction of pseudo-label error pixels inside this mask (when ground
    /// truth is available and errors exist).
    error_recall: Option<f64>,
}

#[derive(Serialize)]
struct SampleAnnotation {
    id: String,
    input_file: String,
    entropy_file: String,
    pseudo_file: String,
    error_file: Option<String>,
    error_rate: Option<f64>,
    masks: Vec<MaskAnnotation>,
}

pub fn run(args: VisualizeArgs) -> Result<()> {
    let dirs = DatasetDirs::new(&args.data)?;
    let samples = dirs.load_split(&args.split)?;
    let (net, _step) = load_network(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    check_class_compat(net.config().num_classes, &samples)?;
    let num_classes = net.config().num_classes;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut annotations = Vec::new();
    for sample in samples.iter().take(args.samples) {
        let images = image_batch(std::slice::from_ref(sample), &[0]);
        let (pseudo, probs) = generate_pseudo_labels(&net, &images)?;
        let entropy = entropy_map(&probs);

        let base = overlay::channel_as_f64(&sample.image, 0);
        let input_file = format!("{}_input.png", sample.id);
        overlay::save_gray(&base.view(), 1.0, &args.out.join(&input_file))?;

        let entropy_plane = entropy.values.index_axis(ndarray::Axis(0), 0).to_owned();
        let entropy_file = format!("{}_entropy.png", sample.id);
        overlay::save_gray(
            &entropy_plane.view(),
            (num_classes as f64).ln(),
            &args.out.join(&entropy_file),
        )?;

        let pseudo_plane = pseudo.index_axis(ndarray::Axis(0), 0).to_owned();
        let pseudo_file = format!("{}_pseudo.png", sample.id);
        overlay::save_class_map(&pseudo_plane.view(), &args.out.join(&pseudo_file))?;

        // pseudo-label error map against ground truth, when available
        let (error_file, error_rate, errors) = match &sample.label {
            Some(gt) => {
                let mut gt3 = ndarray::Array3::<u8>::zeros((1, gt.dim().0, gt.dim().1));
                gt3.index_axis_mut(ndarray::Axis(0), 0).assign(gt);
                let errors = pseudo_label_error_map(&pseudo, &gt3);
                let plane = errors.index_axis(ndarray::Axis(0), 0).to_owned();
                let file = format!("{}_error.png", sample.id);
                overlay::save_mask_overlay(&base.view(), &plane.view(), &args.out.join(&file))?;
                let rate =
                    errors.iter().filter(|&&v| v == 1).count() as f64 / errors.len() as f64;
                (Some(file), Some(rate), Some(errors))
            }
            None => (None, None, None),
        };

        let mut masks = Vec::new();
        for &q in &args.percentiles {
            let mask = region_mask(&entropy, q, PercentileScope::Batch)?;
            let file = format!("{}_mask_q{q}.png", sample.id);
            let plane = mask.values.index_axis(ndarray::Axis(0), 0).to_owned();
            overlay::save_mask_overlay(&base.view(), &plane.view(), &args.out.join(&file))?;
            let error_recall = errors
                .as_ref()
                .and_then(|e| error_recall_within_mask(e, &mask));
            masks.push(MaskAnnotation {
                q,
                file,
                threshold: mask.threshold_used,
                density: mask.density(),
                error_recall,
            });
        }

        annotations.push(SampleAnnotation {
            id: sample.id.clone(),
            input_file,
            entropy_file,
            pseudo_file,
            error_file,
            error_rate,
            masks,
        });
    }

    let path = args.out.join("annotations.json");
    std::fs::write(&path, serde_json::to_string_pretty(&annotations)?)
        .with_context(|| format!("writing {}", path.display()))?;
    println!(
        "wrote figures for {} samples to {}",
        annotations.len(),
        args.out.display()
    );
    Ok(())
}
