use regseg_core::datasets::{generate_synthetic_dataset, SyntheticSpec};
use regseg_core::metrics::evaluate;
use regseg_core::model::NetworkConfig;
use regseg_core::training::{pretrain_teacher, TrainConfig};

#[test]
#[ignore]
fn diagnose_pretraining() {
    let spec = SyntheticSpec {
        image_size: 48,
        num_classes: 4,
        num_samples: 8,
        boundary_blur_sigma: 1.5,
        intensity_noise_std: 0.08,
        seed: 20,
    };
    let pool = generate_synthetic_dataset(&spec).unwrap();

    let lrs: Vec<f64> = std::env::var("LRS")
        .map(|v| v.split(',').map(|s| s.parse().unwrap()).collect())
        .unwrap_or_else(|_| vec![0.02]);
    for lr in lrs {
        let cfg = TrainConfig {
            pretrain_iters: std::env::var("PRE").map(|v| v.parse().unwrap()).unwrap_or(150),
            batch_labeled: 4,
            lr,
            seed: 1,
            net: NetworkConfig {
                in_channels: 1,
                num_classes: 4,
                base_width: 8,
                depth: 2,
                seed: 1,
            },
            ..TrainConfig::default()
        };
        let (net, logs) = pretrain_teacher(&pool, &cfg).unwrap();
        eprintln!("lr={lr}");
        for (i, rec) in logs.iter().enumerate() {
            if i % 10 == 0 || i + 1 == logs.len() {
                eprintln!(
                    "  step {i}: total={:.4} ce_u={:.4} ce_r={:.4} dice_u={:.4} dice_r={:.4} density={:.3}",
                    rec.loss_total,
                    rec.labeled.ce_masked_unreliable,
                    rec.labeled.ce_masked_reliable,
                    rec.labeled.dice_masked_unreliable,
                    rec.labeled.dice_masked_reliable,
                    rec.mask_density_labeled.unwrap()
                );
            }
        }
        let train_metrics = evaluate(&net, &pool, 4).unwrap();
        eprintln!(
            "  train dice: mean={:.2} per-class={:?}",
            train_metrics.mean.dice,
            train_metrics
                .per_class
                .iter()
                .map(|(c, m)| (*c, (m.dice * 100.0).round() / 100.0))
                .collect::<Vec<_>>()
        );
        let params_finite = net.params().iter().all(|v| v.is_finite());
        eprintln!("  params finite: {params_finite}");
    }
}
