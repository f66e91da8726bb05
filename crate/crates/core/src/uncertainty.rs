//! Per-pixel prediction entropy and percentile-thresholded region masks.
//!
//! A pixel's entropy is the Shannon entropy of its predicted class
//! distribution (natural log). The uncertainty mask marks the pixels whose
//! entropy strictly exceeds the q-th percentile of the current tensor, so a
//! roughly fixed fraction `(100-q)%` of pixels lands in the unreliable region
//! every iteration regardless of how confident the model has become.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ProbMap;
use crate::util::linear_percentile;

/// Per-pixel entropy in nats, `[B, H, W]`; bounded by `ln(num_classes)`.
#[derive(Debug, Clone)]
pub struct EntropyMap {
    pub values: Array3<f64>,
}

/// Binary unreliable-region mask, `[B, H, W]`.
///
/// `1` marks pixels whose entropy strictly exceeds the threshold; ties go to
/// the reliable region.
#[derive(Debug, Clone)]
pub struct RegionMask {
    pub values: Array3<u8>,
    /// Threshold actually applied (per-image scope records the mean).
    pub threshold_used: f64,
    /// Percentile that produced the threshold, when one did.
    pub percentile_q: Option<f64>,
}

impl RegionMask {
    /// Fraction of pixels marked unreliable.
    pub fn density(&self) -> f64 {
        let ones = self.values.iter().filter(|&&v| v == 1).count();
        ones as f64 / self.values.len() as f64
    }

    /// All-zero mask (everything reliable), for degenerate paths.
    pub fn empty_like(shape: (usize, usize, usize)) -> RegionMask {
        RegionMask {
            values: Array3::zeros(shape),
            threshold_used: f64::INFINITY,
            percentile_q: None,
        }
    }
}

/// Whether the percentile threshold pools the whole batch tensor or is
/// recomputed per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PercentileScope {
    #[default]
    Batch,
    PerImage,
}

/// Shannon entropy of each pixel's class distribution, with `0 ln 0 := 0`.
pub fn entropy_map(probs: &ProbMap) -> EntropyMap {
    let (b, c, h, w) = probs.values.dim();
    let src = probs.values.as_slice().expect("probs contiguous");
    let mut out = Array3::<f64>::zeros((b, h, w));
    let dst = out.as_slice_mut().expect("out contiguous");
    let hw = h * w;
    for bi in 0..b {
        for p in 0..hw {
            let mut acc = 0.0;
            for ci in 0..c {
                let v = src[(bi * c + ci) * hw + p];
                if v > 0.0 {
                    acc -= v * v.ln();
                }
            }
            dst[bi * hw + p] = acc;
        }
    }
    EntropyMap { values: out }
}

/// The q-th percentile of all entropy values in the tensor
/// (linear interpolation between order statistics).
pub fn percentile_threshold(entropy: &EntropyMap, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 100.0) {
        return Err(Error::Config(format!(
            "percentile must be in (0, 100), got {q}"
        )));
    }
    if entropy.values.is_empty() {
        return Err(Error::Shape("entropy tensor is empty".into()));
    }
    Ok(linear_percentile(
        entropy.values.as_slice().expect("entropy contiguous"),
        q,
    ))
}

/// Mask of pixels whose entropy strictly exceeds `threshold`.
pub fn uncertainty_mask(entropy: &EntropyMap, threshold: f64) -> RegionMask {
    let values = entropy.values.mapv(|v| u8::from(v > threshold));
    RegionMask {
        values,
        threshold_used: threshold,
        percentile_q: None,
    }
}

/// Threshold-and-mask in one step under the configured scope.
pub fn region_mask(entropy: &EntropyMap, q: f64, scope: PercentileScope) -> Result<RegionMask> {
    match scope {
        PercentileScope::Batch => {
            let mu = percentile_threshold(entropy, q)?;
            let mut mask = uncertainty_mask(entropy, mu);
            mask.percentile_q = Some(q);
            Ok(mask)
        }
        PercentileScope::PerImage => {
            if !(q > 0.0 && q < 100.0) {
                return Err(Error::Config(format!(
                    "percentile must be in (0, 100), got {q}"
                )));
            }
            let (b, h, w) = entropy.values.dim();
            let mut values = Array3::<u8>::zeros((b, h, w));
            let mut mu_sum = 0.0;
            for bi in 0..b {
                let plane = entropy.values.index_axis(ndarray::Axis(0), bi);
                let flat: Vec<f64> = plane.iter().copied().collect();
                let mu = linear_percentile(&flat, q);
                mu_sum += mu;
                let mut out_plane = values.index_axis_mut(ndarray::Axis(0), bi);
                for (dst, &v) in out_plane.iter_mut().zip(plane.iter()) {
                    *dst = u8::from(v > mu);
                }
            }
            Ok(RegionMask {
                values,
                threshold_used: mu_sum / b as f64,
                percentile_q: Some(q),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prob_map_from_pixel(pixel: &[f64]) -> ProbMap {
        let c = pixel.len();
        let mut values = Array4::<f64>::zeros((1, c, 1, 1));
        for (ci, &v) in pixel.iter().enumerate() {
            values[[0, ci, 0, 0]] = v;
        }
        ProbMap { values }
    }

    fn random_prob_map(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> ProbMap {
        let mut values = Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let mut raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
                    let sum: f64 = raw.iter().sum();
                    for v in &mut raw {
                        *v /= sum;
                    }
                    for ci in 0..c {
                        values[[bi, ci, y, x]] = raw[ci];
                    }
                }
            }
        }
        ProbMap { values }
    }

    #[test]
    fn one_hot_pixel_has_zero_entropy() {
        let u = entropy_map(&prob_map_from_pixel(&[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(u.values[[0, 0, 0]], 0.0);
    }

    #[test]
    fn uniform_pixel_has_log_c_entropy() {
        let u = entropy_map(&prob_map_from_pixel(&[0.25; 4]));
        assert!((u.values[[0, 0, 0]] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn skewed_pixel_matches_closed_form() {
        let u = entropy_map(&prob_map_from_pixel(&[0.7, 0.1, 0.1, 0.1]));
        // -(0.7 ln 0.7 + 3 * 0.1 ln 0.1), evaluated independently
        let expected = -(0.7 * 0.7f64.ln() + 0.3 * 0.1f64.ln());
        assert!((u.values[[0, 0, 0]] - expected).abs() < 1e-7);
    }

    #[test]
    fn percentile_matches_interpolation_example() {
        let values: Vec<f64> = (0..100).map(|v| v as f64).collect();
        let u = EntropyMap {
            values: Array3::from_shape_vec((1, 10, 10), values).unwrap(),
        };
        let mu = percentile_threshold(&u, 95.0).unwrap();
        assert!((mu - 94.05).abs() < 1e-12);
    }

    #[test]
    fn percentile_of_constant_is_that_constant() {
        let u = EntropyMap {
            values: Array3::from_elem((2, 3, 3), 0.42),
        };
        for q in [1.0, 37.0, 50.0, 95.0, 99.0] {
            assert_eq!(percentile_threshold(&u, q).unwrap(), 0.42);
        }
    }

    #[test]
    fn percentile_rejects_out_of_range_q() {
        let u = EntropyMap {
            values: Array3::from_elem((1, 2, 2), 0.5),
        };
        for q in [0.0, 100.0, -3.0, 120.0] {
            assert!(matches!(
                percentile_threshold(&u, q),
                Err(crate::error::Error::Config(_))
            ));
        }
    }

    #[test]
    fn constant_entropy_yields_empty_mask() {
        let u = EntropyMap {
            values: Array3::from_elem((1, 4, 4), 1.0),
        };
        let mu = percentile_threshold(&u, 95.0).unwrap();
        let mask = uncertainty_mask(&u, mu);
        assert!(mask.values.iter().all(|&v| v == 0));
    }

    #[test]
    fn single_pixel_above_threshold() {
        let mut values = Array3::<f64>::from_elem((1, 4, 4), 0.2);
        values[[0, 2, 3]] = 0.9;
        let mask = uncertainty_mask(&EntropyMap { values }, 0.5);
        assert_eq!(mask.values.iter().filter(|&&v| v == 1).count(), 1);
        assert_eq!(mask.values[[0, 2, 3]], 1);
    }

    #[test]
    fn mask_matches_sort_oracle_on_4x4_q75() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut values = Array3::<f64>::zeros((1, 4, 4));
        for v in values.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        let u = EntropyMap {
            values: values.clone(),
        };
        let mask = region_mask(&u, 75.0, PercentileScope::Batch).unwrap();

        // sort-based oracle: mark strictly above the interpolated percentile
        let mut sorted: Vec<f64> = values.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let rank = 0.75 * (sorted.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let mu = sorted[lo] + (rank - lo as f64) * (sorted[lo + 1] - sorted[lo]);
        for (m, v) in mask.values.iter().zip(values.iter()) {
            assert_eq!(*m == 1, *v > mu);
        }
        // top 25% of 16 pixels = 4, minus the tie rule
        assert!(mask.values.iter().filter(|&&m| m == 1).count() <= 4);
    }

    #[test]
    fn percentile_agrees_with_sort_oracle_on_200_random_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..200 {
            let n = rng.random_range(1..400usize);
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let q = rng.random_range(0.5..99.5);
            let u = EntropyMap {
                values: Array3::from_shape_vec((1, 1, n), values.clone()).unwrap(),
            };
            let got = percentile_threshold(&u, q).unwrap();

            let mut sorted = values;
            sorted.sort_by(f64::total_cmp);
            let expected = if sorted.len() == 1 {
                sorted[0]
            } else {
                let rank = q / 100.0 * (sorted.len() - 1) as f64;
                let lo = rank.floor() as usize;
                let hi = (lo + 1).min(sorted.len() - 1);
                sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
            };
            assert!(
                (got - expected).abs() < 1e-9 * expected.abs().max(1.0),
                "case {case}: got {got}, oracle {expected}"
            );
        }
    }

    #[test]
    fn per_image_scope_thresholds_each_slice() {
        // One low-entropy image and one high-entropy image; batch scope puts
        // all unreliable pixels in image 1, per-image scope splits them.
        let mut values = Array3::<f64>::zeros((2, 4, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for y in 0..4 {
            for x in 0..4 {
                values[[0, y, x]] = rng.random_range(0.0..0.1);
                values[[1, y, x]] = rng.random_range(0.9..1.0);
            }
        }
        let u = EntropyMap { values };
        let batch = region_mask(&u, 75.0, PercentileScope::Batch).unwrap();
        let per_image = region_mask(&u, 75.0, PercentileScope::PerImage).unwrap();
        let ones_img0_batch: usize = batch
            .values
            .index_axis(ndarray::Axis(0), 0)
            .iter()
            .map(|&v| v as usize)
            .sum();
        assert_eq!(ones_img0_batch, 0);
        let ones_img0_per: usize = per_image
            .values
            .index_axis(ndarray::Axis(0), 0)
            .iter()
            .map(|&v| v as usize)
            .sum();
        assert!(ones_img0_per > 0);
    }

    proptest! {
        #[test]
        fn entropy_is_bounded_and_zero_iff_onehot(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = rng.random_range(2..6usize);
            let p = random_prob_map(&mut rng, 2, c, 3, 3);
            let u = entropy_map(&p);
            let bound = (c as f64).ln() + 1e-6;
            for &v in u.values.iter() {
                prop_assert!(v >= 0.0 && v <= bound);
                // interior distributions (all entries > 0) are never one-hot
                prop_assert!(v > 0.0);
            }
        }

        #[test]
        fn mask_is_invariant_under_monotone_transforms(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut values = Array3::<f64>::zeros((2, 5, 5));
            for v in values.iter_mut() {
                *v = rng.random_range(0.0..1.4);
            }
            let q = rng.random_range(5.0..99.0);
            let u = EntropyMap { values: values.clone() };
            let base = region_mask(&u, q, PercentileScope::Batch).unwrap();

            let transforms: [fn(f64) -> f64; 3] = [
                |v| 3.0 * v + 1.0,
                |v| v * v * v,
                |v| v.exp(),
            ];
            for transform in transforms {
                let tu = EntropyMap { values: values.mapv(transform) };
                let tmask = region_mask(&tu, q, PercentileScope::Batch).unwrap();
                prop_assert_eq!(&tmask.values, &base.values);
            }
        }

        #[test]
        fn mask_density_tracks_percentile_for_distinct_values(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (b, h, w) = (2usize, 6usize, 6usize);
            let n = b * h * w;
            // all-distinct values by construction
            let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
            use rand::seq::SliceRandom;
            values.shuffle(&mut rng);
            let q = rng.random_range(10.0..99.0);
            let u = EntropyMap { values: Array3::from_shape_vec((b, h, w), values).unwrap() };
            let mask = region_mask(&u, q, PercentileScope::Batch).unwrap();
            let expected = (100.0 - q) / 100.0;
            prop_assert!((mask.density() - expected).abs() <= 1.0 / n as f64 + 1e-12);
        }
    }
}
