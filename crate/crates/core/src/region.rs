//! Region-split labels and the weighted hybrid segmentation losses.
//!
//! A region mask partitions every (pseudo-)label map into a reliable and an
//! unreliable one-hot tensor. The two weighting schemes differ only in where
//! the full loss weight lands:
//!
//! - URL (labeled data): full weight on the unreliable region, `alpha` on the
//!   reliable region, so precise annotations concentrate on the pixels the
//!   model is uncertain about.
//! - CRL (unlabeled data): full weight on the reliable region, `alpha` on the
//!   unreliable region, so noisy pseudo-labels are damped exactly where they
//!   are most likely wrong.
//!
//! Per region the loss is cross-entropy (mean over in-region pixels) plus
//! soft Dice computed with probabilities and targets zeroed outside the
//! region. Both are defined as zero on an empty region.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softmax, Network, ProbMap};
use crate::uncertainty::RegionMask;

/// Smoothing constant in the Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probability floor inside `ln` for cross-entropy.
const CE_CLAMP: f64 = 1e-12;

/// Reliable/unreliable one-hot label pair produced by masking.
///
/// `reliable + unreliable == one_hot(labels)` exactly; `reliable` is zero
/// wherever the mask is 1 and `unreliable` is zero wherever it is 0.
#[derive(Debug, Clone)]
pub struct RegionSplitLabels {
    pub reliable: Array4<f64>,
    pub unreliable: Array4<f64>,
    pub mask: RegionMask,
}

/// Which region carries the full loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionWeighting {
    /// Full weight on the unreliable region (labeled stream).
    Url,
    /// Full weight on the reliable region (unlabeled stream).
    Crl,
    /// No region weighting: one hybrid term over the whole image.
    Plain,
}

/// Loss components of one stream.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_masked_unreliable: f64,
    pub ce_masked_reliable: f64,
    pub dice_masked_unreliable: f64,
    pub dice_masked_reliable: f64,
    pub alpha: f64,
    pub weighting: RegionWeighting,
}

impl LossBreakdown {
    pub fn zero(weighting: RegionWeighting, alpha: f64) -> LossBreakdown {
        LossBreakdown {
            total: 0.0,
            ce_masked_unreliable: 0.0,
            ce_masked_reliable: 0.0,
            dice_masked_unreliable: 0.0,
            dice_masked_reliable: 0.0,
            alpha,
            weighting,
        }
    }
}

/// One-hot encode `[B, H, W]` class ids into `[B, C, H, W]`.
pub fn one_hot(labels: &Array3<u8>, num_classes: usize) -> Array4<f64> {
    let (b, h, w) = labels.dim();
    let mut out = Array4::<f64>::zeros((b, num_classes, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let c = labels[[bi, y, x]] as usize;
                debug_assert!(c < num_classes);
                out[[bi, c, y, x]] = 1.0;
            }
        }
    }
    out
}

/// Split a label map into reliable/unreliable one-hot tensors under `mask`.
pub fn split_regions(
    labels: &Array3<u8>,
    mask: &RegionMask,
    num_classes: usize,
) -> Result<RegionSplitLabels> {
    if labels.dim() != mask.values.dim() {
        return Err(Error::Shape(format!(
            "labels {:?} vs mask {:?}",
            labels.dim(),
            mask.values.dim()
        )));
    }
    if let Some(&max) = labels.iter().max() {
        if (max as usize) >= num_classes {
            return Err(Error::Shape(format!(
                "label id {max} out of range for {num_classes} classes"
            )));
        }
    }
    let (b, h, w) = labels.dim();
    let mut reliable = Array4::<f64>::zeros((b, num_classes, h, w));
    let mut unreliable = Array4::<f64>::zeros((b, num_classes, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let c = labels[[bi, y, x]] as usize;
                if mask.values[[bi, y, x]] == 1 {
                    unreliable[[bi, c, y, x]] = 1.0;
                } else {
                    reliable[[bi, c, y, x]] = 1.0;
                }
            }
        }
    }
    Ok(RegionSplitLabels {
        reliable,
        unreliable,
        mask: mask.clone(),
    })
}

// ---------------------------------------------------------------------------
// Masked hybrid loss
// ---------------------------------------------------------------------------

/// Pixel selector for one region term: `true` pixels participate.
enum Region<'a> {
    Masked { mask: &'a Array3<u8>, value: u8 },
    All,
}

impl Region<'_> {
    #[inline]
    fn contains(&self, b: usize, y: usize, x: usize) -> bool {
        match self {
            Region::All => true,
            Region::Masked { mask, value } => mask[[b, y, x]] == *value,
        }
    }
}

struct MaskedLossTerms {
    ce: f64,
    dice: f64,
}

/// Cross-entropy and soft Dice restricted to a pixel region, plus (optionally)
/// the gradient of `ce + dice` w.r.t. the probabilities, accumulated into
/// `dprob` with weight `grad_weight`.
fn masked_terms(
    probs: &ProbMap,
    target: &Array4<f64>,
    region: &Region,
    mut dprob: Option<(&mut Array4<f64>, f64)>,
) -> MaskedLossTerms {
    let (b, c, h, w) = probs.values.dim();
    let p = &probs.values;

    // region pixel count
    let mut n_pixels = 0usize;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                if region.contains(bi, y, x) {
                    n_pixels += 1;
                }
            }
        }
    }
    if n_pixels == 0 {
        return MaskedLossTerms { ce: 0.0, dice: 0.0 };
    }
    let n = n_pixels as f64;

    // cross-entropy: mean over in-region pixels of -ln p_y
    let mut ce = 0.0;
    // Dice accumulators per class
    let mut inter = vec![0.0f64; c];
    let mut p_sum = vec![0.0f64; c];
    let mut t_sum = vec![0.0f64; c];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                if !region.contains(bi, y, x) {
                    continue;
                }
                for ci in 0..c {
                    let pv = p[[bi, ci, y, x]];
                    let tv = target[[bi, ci, y, x]];
                    if tv > 0.0 {
                        ce -= tv * pv.max(CE_CLAMP).ln();
                    }
                    inter[ci] += pv * tv;
                    p_sum[ci] += pv;
                    t_sum[ci] += tv;
                }
            }
        }
    }
    ce /= n;

    let mut dice = 1.0;
    let mut ratios = vec![0.0f64; c];
    for ci in 0..c {
        ratios[ci] = (2.0 * inter[ci] + DICE_SMOOTH) / (p_sum[ci] + t_sum[ci] + DICE_SMOOTH);
        dice -= ratios[ci] / c as f64;
    }

    if let Some((dp, weight)) = dprob.as_mut() {
        let c_f = c as f64;
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    if !region.contains(bi, y, x) {
                        continue;
                    }
                    for ci in 0..c {
                        let pv = p[[bi, ci, y, x]];
                        let tv = target[[bi, ci, y, x]];
                        let mut g = 0.0;
                        // d(ce)/dp: only where the target is set
                        if tv > 0.0 && pv > CE_CLAMP {
                            g -= tv / (pv * n);
                        }
                        // d(dice)/dp = -(1/C) d(ratio_c)/dp
                        let den = p_sum[ci] + t_sum[ci] + DICE_SMOOTH;
                        let dratio = (2.0 * tv * den - (2.0 * inter[ci] + DICE_SMOOTH)) / (den * den);
                        g -= dratio / c_f;
                        dp[[bi, ci, y, x]] += *weight * g;
                    }
                }
            }
        }
    }

    MaskedLossTerms { ce, dice }
}

/// Region-restricted hybrid loss: `(ce, dice)` over pixels where
/// `pixel_mask == 1`; both zero on an empty mask.
pub fn masked_seg_loss(
    probs: &ProbMap,
    target_onehot: &Array4<f64>,
    pixel_mask: &Array3<u8>,
) -> (f64, f64) {
    let region = Region::Masked {
        mask: pixel_mask,
        value: 1,
    };
    let terms = masked_terms(probs, target_onehot, &region, None);
    (terms.ce, terms.dice)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn region_loss_impl(
    probs: &ProbMap,
    splits: &RegionSplitLabels,
    alpha: f64,
    weighting: RegionWeighting,
    mut dprob: Option<&mut Array4<f64>>,
) -> Result<LossBreakdown> {
    check_alpha(alpha)?;
    let (b, _c, h, w) = probs.values.dim();
    if splits.mask.values.dim() != (b, h, w) {
        return Err(Error::Shape(format!(
            "probs {:?} vs mask {:?}",
            probs.values.dim(),
            splits.mask.values.dim()
        )));
    }

    let (w_unrel, w_rel) = match weighting {
        RegionWeighting::Url => (1.0, alpha),
        RegionWeighting::Crl => (alpha, 1.0),
        RegionWeighting::Plain => {
            // single unmasked term against the full one-hot labels
            let full = &splits.reliable + &splits.unreliable;
            let terms = masked_terms(
                probs,
                &full,
                &Region::All,
                dprob.as_deref_mut().map(|dp| (dp, 1.0)),
            );
            return Ok(LossBreakdown {
                total: terms.ce + terms.dice,
                ce_masked_unreliable: 0.0,
                ce_masked_reliable: terms.ce,
                dice_masked_unreliable: 0.0,
                dice_masked_reliable: terms.dice,
                alpha,
                weighting,
            });
        }
    };

    let unrel_region = Region::Masked {
        mask: &splits.mask.values,
        value: 1,
    };
    let rel_region = Region::Masked {
        mask: &splits.mask.values,
        value: 0,
    };
    let unrel = masked_terms(
        probs,
        &splits.unreliable,
        &unrel_region,
        dprob.as_deref_mut().map(|dp| (dp, w_unrel)),
    );
    let rel = masked_terms(
        probs,
        &splits.reliable,
        &rel_region,
        dprob.as_deref_mut().map(|dp| (dp, w_rel)),
    );

    let total = w_unrel * (unrel.ce + unrel.dice) + w_rel * (rel.ce + rel.dice);
    Ok(LossBreakdown {
        total,
        ce_masked_unreliable: unrel.ce,
        ce_masked_reliable: rel.ce,
        dice_masked_unreliable: unrel.dice,
        dice_masked_reliable: rel.dice,
        alpha,
        weighting,
    })
}

/// Labeled-stream loss: full weight on the unreliable region, `alpha` on the
/// reliable region.
pub fn url_loss(probs: &ProbMap, splits: &RegionSplitLabels, alpha: f64) -> Result<LossBreakdown> {
    region_loss_impl(probs, splits, alpha, RegionWeighting::Url, None)
}

/// Unlabeled-stream loss: full weight on the reliable region, `alpha` on the
/// unreliable region.
pub fn crl_loss(probs: &ProbMap, splits: &RegionSplitLabels, alpha: f64) -> Result<LossBreakdown> {
    region_loss_impl(probs, splits, alpha, RegionWeighting::Crl, None)
}

/// Unmasked hybrid loss over the whole image (the plain baseline path).
pub fn plain_loss(probs: &ProbMap, splits: &RegionSplitLabels) -> Result<LossBreakdown> {
    region_loss_impl(probs, splits, 1.0, RegionWeighting::Plain, None)
}

/// Loss plus its gradient w.r.t. the logits that produced `probs`
/// (softmax Jacobian applied internally).
pub fn region_loss_with_logit_grad(
    probs: &ProbMap,
    splits: &RegionSplitLabels,
    alpha: f64,
    weighting: RegionWeighting,
) -> Result<(LossBreakdown, Array4<f64>)> {
    let mut dprob = Array4::<f64>::zeros(probs.values.dim());
    let breakdown = region_loss_impl(probs, splits, alpha, weighting, Some(&mut dprob))?;

    // dL/dz_k = p_k (g_k - sum_c g_c p_c)
    let (b, c, h, w) = probs.values.dim();
    let mut dlogits = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut dot = 0.0;
                for ci in 0..c {
                    dot += dprob[[bi, ci, y, x]] * probs.values[[bi, ci, y, x]];
                }
                for ci in 0..c {
                    let p = probs.values[[bi, ci, y, x]];
                    dlogits[[bi, ci, y, x]] = p * (dprob[[bi, ci, y, x]] - dot);
                }
            }
        }
    }
    Ok((breakdown, dlogits))
}

/// Combined objective of the labeled and unlabeled streams.
pub fn total_loss(labeled: &LossBreakdown, unlabeled: &LossBreakdown) -> f64 {
    labeled.total + unlabeled.total
}

/// Hard pseudo-labels from the teacher: per-pixel argmax (smallest id wins
/// ties), along with the probability map they came from.
pub fn generate_pseudo_labels(
    teacher: &Network,
    images: &Array4<f64>,
) -> Result<(Array3<u8>, ProbMap)> {
    let logits = teacher.forward(images)?;
    let probs = softmax(&logits);
    let (b, c, h, w) = probs.values.dim();
    let mut labels = Array3::<u8>::zeros((b, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_v = probs.values[[bi, 0, y, x]];
                for ci in 1..c {
                    let v = probs.values[[bi, ci, y, x]];
                    if v > best_v {
                        best = ci;
                        best_v = v;
                    }
                }
                labels[[bi, y, x]] = best as u8;
            }
        }
    }
    Ok((labels, probs))
}
