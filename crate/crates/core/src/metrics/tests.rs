use super::*;
use crate::datasets::Sample;
use crate::model::{init_network, NetworkConfig};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mask_of(h: usize, w: usize, ones: &[(usize, usize)]) -> Array2<bool> {
    let mut m = Array2::from_elem((h, w), false);
    for &(y, x) in ones {
        m[[y, x]] = true;
    }
    m
}

fn random_bool_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Array2<bool> {
    let mut m = Array2::from_elem((h, w), false);
    for v in m.iter_mut() {
        *v = rng.random_bool(p);
    }
    m
}

// ---------------------------------------------------------------------------
// Brute-force oracle: all-pairs boundary distances, independent of the EDT.
// ---------------------------------------------------------------------------

fn oracle_boundary(mask: &Array2<bool>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            let edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let bg = (y > 0 && !mask[[y - 1, x]])
                || (y + 1 < h && !mask[[y + 1, x]])
                || (x > 0 && !mask[[y, x - 1]])
                || (x + 1 < w && !mask[[y, x + 1]]);
            if edge || bg {
                pts.push((y, x));
            }
        }
    }
    pts
}

fn oracle_directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(ay, ax)| {
            to.iter()
                .map(|&(by, bx)| {
                    let dy = ay as f64 - by as f64;
                    let dx = ax as f64 - bx as f64;
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn oracle_percentile(mut values: Vec<f64>, q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    values[lo] + (rank - lo as f64) * (values[hi] - values[lo])
}

fn oracle_hd95(a: &Array2<bool>, b: &Array2<bool>) -> Option<f64> {
    let ba = oracle_boundary(a);
    let bb = oracle_boundary(b);
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let d_ab = oracle_directed(&ba, &bb);
    let d_ba = oracle_directed(&bb, &ba);
    Some(oracle_percentile(d_ab, 95.0).max(oracle_percentile(d_ba, 95.0)))
}

fn oracle_asd(a: &Array2<bool>, b: &Array2<bool>) -> Option<f64> {
    let ba = oracle_boundary(a);
    let bb = oracle_boundary(b);
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let d_ab = oracle_directed(&ba, &bb);
    let d_ba = oracle_directed(&bb, &ba);
    let total: f64 = d_ab.iter().sum::<f64>() + d_ba.iter().sum::<f64>();
    Some(total / (d_ab.len() + d_ba.len()) as f64)
}

// ---------------------------------------------------------------------------

#[test]
fn dice_identity_and_disjoint_cases() {
    let a = mask_of(4, 4, &[(0, 0), (1, 1), (2, 2)]);
    assert_eq!(dice(&a.view(), &a.view()), 100.0);

    let b = mask_of(4, 4, &[(3, 3)]);
    assert_eq!(dice(&a.view(), &b.view()), 0.0);

    let empty = Array2::from_elem((4, 4), false);
    assert_eq!(dice(&empty.view(), &empty.view()), 100.0);
}

#[test]
fn dice_counts_match_direct_count_oracle() {
    // |A| = 4, |B| = 4, |A ∩ B| = 2 -> 2*2/8 = 50%
    let a = mask_of(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
    let b = mask_of(4, 4, &[(1, 0), (1, 1), (2, 0), (2, 1)]);
    assert_eq!(dice(&a.view(), &b.view()), 50.0);
}

#[test]
fn jaccard_cases_and_identity_relation() {
    let a = mask_of(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
    let b = mask_of(4, 4, &[(1, 0), (1, 1), (2, 0), (2, 1)]);
    // |A ∩ B| = 2, |A ∪ B| = 6
    assert!((jaccard(&a.view(), &b.view()) - 100.0 * 2.0 / 6.0).abs() < 1e-12);
    assert_eq!(jaccard(&a.view(), &a.view()), 100.0);

    // j = d / (2 - d) in [0,1] units, and j <= d
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let a = random_bool_mask(&mut rng, 8, 8, 0.4);
        let b = random_bool_mask(&mut rng, 8, 8, 0.4);
        let d = dice(&a.view(), &b.view()) / 100.0;
        let j = jaccard(&a.view(), &b.view()) / 100.0;
        assert!(j <= d + 1e-12);
        if d > 0.0 {
            assert!((j - d / (2.0 - d)).abs() < 1e-12);
        }
    }
}

#[test]
fn hd95_and_asd_identity_is_zero() {
    let a = mask_of(6, 6, &[(2, 2), (2, 3), (3, 2), (3, 3)]);
    assert_eq!(hd95(&a.view(), &a.view()), Some(0.0));
    assert_eq!(asd(&a.view(), &a.view()), Some(0.0));
}

#[test]
fn singleton_masks_three_pixels_apart() {
    let a = mask_of(8, 8, &[(4, 1)]);
    let b = mask_of(8, 8, &[(4, 4)]);
    assert_eq!(hd95(&a.view(), &b.view()), Some(3.0));
    assert_eq!(asd(&a.view(), &b.view()), Some(3.0));
}

#[test]
fn empty_mask_gives_sentinel_not_crash() {
    let a = mask_of(4, 4, &[(1, 1)]);
    let empty = Array2::from_elem((4, 4), false);
    assert_eq!(hd95(&a.view(), &empty.view()), None);
    assert_eq!(asd(&empty.view(), &a.view()), None);
    assert_eq!(hd95(&empty.view(), &empty.view()), None);
}

#[test]
fn distances_match_brute_force_oracle_on_200_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut checked = 0;
    while checked < 200 {
        let h = rng.random_range(2..=16usize);
        let w = rng.random_range(2..=16usize);
        let p = rng.random_range(0.05..0.7);
        let a = random_bool_mask(&mut rng, h, w, p);
        let b = random_bool_mask(&mut rng, h, w, p);

        let got_hd = hd95(&a.view(), &b.view());
        let want_hd = oracle_hd95(&a, &b);
        let got_asd = asd(&a.view(), &b.view());
        let want_asd = oracle_asd(&a, &b);

        match (got_hd, want_hd) {
            (None, None) => {}
            (Some(g), Some(o)) => assert!((g - o).abs() < 1e-9, "hd95 {g} vs oracle {o}"),
            other => panic!("hd95 sentinel mismatch: {other:?}"),
        }
        match (got_asd, want_asd) {
            (None, None) => {}
            (Some(g), Some(o)) => assert!((g - o).abs() < 1e-9, "asd {g} vs oracle {o}"),
            other => panic!("asd sentinel mismatch: {other:?}"),
        }
        checked += 1;
    }
}

#[test]
fn metrics_invariant_under_joint_translation() {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    for _ in 0..30 {
        let a_core = random_bool_mask(&mut rng, 6, 6, 0.4);
        let b_core = random_bool_mask(&mut rng, 6, 6, 0.4);
        let place = |core: &Array2<bool>, oy: usize, ox: usize| {
            let mut big = Array2::from_elem((16, 16), false);
            for ((y, x), &v) in core.indexed_iter() {
                big[[y + oy, x + ox]] = v;
            }
            big
        };
        let (a0, b0) = (place(&a_core, 2, 2), place(&b_core, 2, 2));
        let (a1, b1) = (place(&a_core, 7, 5), place(&b_core, 7, 5));

        assert_eq!(dice(&a0.view(), &b0.view()), dice(&a1.view(), &b1.view()));
        assert_eq!(
            jaccard(&a0.view(), &b0.view()),
            jaccard(&a1.view(), &b1.view())
        );
        match (hd95(&a0.view(), &b0.view()), hd95(&a1.view(), &b1.view())) {
            (None, None) => {}
            (Some(x), Some(y)) => assert!((x - y).abs() < 1e-9),
            other => panic!("translation changed sentinel: {other:?}"),
        }
        match (asd(&a0.view(), &b0.view()), asd(&a1.view(), &b1.view())) {
            (None, None) => {}
            (Some(x), Some(y)) => assert!((x - y).abs() < 1e-9),
            other => panic!("translation changed sentinel: {other:?}"),
        }
    }
}

#[test]
fn pooled_hd95_variant_uses_combined_distances() {
    let a = mask_of(8, 8, &[(1, 1), (1, 2)]);
    let b = mask_of(8, 8, &[(6, 1)]);
    let pooled = hd95_with(&a.view(), &b.view(), Hd95Combine::Pooled).unwrap();
    let ba = oracle_boundary(&a);
    let bb = oracle_boundary(&b);
    let mut all = oracle_directed(&ba, &bb);
    all.extend(oracle_directed(&bb, &ba));
    let want = oracle_percentile(all, 95.0);
    assert!((pooled - want).abs() < 1e-9);
}

#[test]
fn error_map_counts_flipped_pixels() {
    let mut gt = Array3::<u8>::zeros((1, 4, 4));
    gt[[0, 1, 1]] = 2;
    let pseudo = gt.clone();
    assert_eq!(pseudo_label_error_map(&pseudo, &gt).sum(), 0);

    let mut flipped = gt.clone();
    flipped[[0, 3, 3]] = 1;
    let err = pseudo_label_error_map(&flipped, &gt);
    assert_eq!(err.sum(), 1);
    assert_eq!(err[[0, 3, 3]], 1);
}

#[test]
fn recall_within_mask_handles_no_errors() {
    let errors = Array3::<u8>::zeros((1, 4, 4));
    let mask = crate::uncertainty::RegionMask {
        values: Array3::ones((1, 4, 4)),
        threshold_used: 0.0,
        percentile_q: None,
    };
    assert_eq!(error_recall_within_mask(&errors, &mask), None);

    let mut errors = Array3::<u8>::zeros((1, 4, 4));
    errors[[0, 0, 0]] = 1;
    errors[[0, 1, 1]] = 1;
    let mut mask_vals = Array3::<u8>::zeros((1, 4, 4));
    mask_vals[[0, 0, 0]] = 1;
    let mask = crate::uncertainty::RegionMask {
        values: mask_vals,
        threshold_used: 0.0,
        percentile_q: None,
    };
    assert_eq!(error_recall_within_mask(&errors, &mask), Some(0.5));
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn labeled_sample(seed: u64) -> Sample {
    let spec = crate::datasets::SyntheticSpec {
        image_size: 16,
        num_classes: 3,
        num_samples: 1,
        boundary_blur_sigma: 0.0,
        intensity_noise_std: 0.0,
        seed,
    };
    crate::datasets::generate_synthetic_dataset(&spec)
        .unwrap()
        .pop()
        .unwrap()
}

#[test]
fn perfect_predictor_scores_perfectly() {
    let samples: Vec<Sample> = (0..3).map(labeled_sample).collect();
    let record = evaluate_with(
        |s: &Sample| Ok(s.label.clone().expect("labeled")),
        &samples,
        3,
    )
    .unwrap();
    assert_eq!(record.mean.dice, 100.0);
    assert_eq!(record.mean.jaccard, 100.0);
    assert_eq!(record.mean.hd95, Some(0.0));
    assert_eq!(record.mean.asd, Some(0.0));
    assert_eq!(record.n_samples, 3);
}

#[test]
fn all_background_predictor_hits_sentinels() {
    let samples: Vec<Sample> = (0..2).map(labeled_sample).collect();
    let record = evaluate_with(
        |s: &Sample| Ok(Array2::zeros((s.height(), s.width()))),
        &samples,
        3,
    )
    .unwrap();
    assert_eq!(record.mean.dice, 0.0);
    assert_eq!(record.mean.hd95, None);
    assert!(record.mean.n_distance_missing > 0);
    // background class itself overlaps partially
    assert!(record.per_class[&0].dice > 0.0);
}

#[test]
fn evaluate_rejects_unlabeled_and_is_deterministic() {
    let mut samples: Vec<Sample> = (0..2).map(labeled_sample).collect();

    let cfg = NetworkConfig {
        in_channels: 1,
        num_classes: 3,
        base_width: 2,
        depth: 1,
        seed: 5,
    };
    let net = init_network(cfg).unwrap();
    let a = evaluate(&net, &samples, 3).unwrap();
    let b = evaluate(&net, &samples, 3).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );

    samples[0].label = None;
    assert!(matches!(
        evaluate(&net, &samples, 3),
        Err(crate::error::Error::Config(_))
    ));
}
