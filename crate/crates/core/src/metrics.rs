//! Segmentation quality metrics and pseudo-label diagnostics.
//!
//! Overlap metrics (Dice, Jaccard) count pixels; boundary metrics (95HD, ASD)
//! measure Euclidean distances between mask boundaries. Distances come from
//! an exact two-pass squared Euclidean distance transform, so they equal the
//! brute-force all-pairs minimum to floating-point exactness while staying
//! linear in image size.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datasets::Sample;
use crate::error::{Error, Result};
use crate::model::{softmax, Network};
use crate::uncertainty::RegionMask;
use crate::util::linear_percentile;

/// How the two directed 95th-percentile distances combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Hd95Combine {
    /// 95th percentile per direction, then the max of the two.
    #[default]
    MaxOfDirected,
    /// 95th percentile of the pooled distance set.
    Pooled,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct ClassMetrics {
    pub dice: f64,
    pub jaccard: f64,
    /// Mean 95HD over samples where both boundaries exist.
    pub hd95: Option<f64>,
    /// Mean ASD over samples where both boundaries exist.
    pub asd: Option<f64>,
    /// Samples skipped for the distance metrics because a mask was empty.
    pub n_distance_missing: usize,
}

/// Per-class and mean metrics over an evaluation set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub per_class: BTreeMap<usize, ClassMetrics>,
    /// Averages over foreground classes (ids >= 1).
    pub mean: ClassMetrics,
    pub n_samples: usize,
}

// ---------------------------------------------------------------------------
// Overlap metrics
// ---------------------------------------------------------------------------

fn counts(a: &ArrayView2<bool>, b: &ArrayView2<bool>) -> (usize, usize, usize) {
    let mut na = 0;
    let mut nb = 0;
    let mut inter = 0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    (na, nb, inter)
}

/// Dice overlap in percent; both-empty pairs score 100.
pub fn dice(a: &ArrayView2<bool>, b: &ArrayView2<bool>) -> f64 {
    let (na, nb, inter) = counts(a, b);
    if na + nb == 0 {
        return 100.0;
    }
    200.0 * inter as f64 / (na + nb) as f64
}

/// Jaccard overlap in percent; both-empty pairs score 100.
pub fn jaccard(a: &ArrayView2<bool>, b: &ArrayView2<bool>) -> f64 {
    let (na, nb, inter) = counts(a, b);
    let union = na + nb - inter;
    if union == 0 {
        return 100.0;
    }
    100.0 * inter as f64 / union as f64
}

// ---------------------------------------------------------------------------
// Boundary extraction and distance transform
// ---------------------------------------------------------------------------

/// A boundary pixel is foreground with a 4-connected background neighbor or
/// touching the image edge.
pub fn boundary_of(mask: &ArrayView2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            let on_edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let has_bg_neighbor = (y > 0 && !mask[[y - 1, x]])
                || (y + 1 < h && !mask[[y + 1, x]])
                || (x > 0 && !mask[[y, x - 1]])
                || (x + 1 < w && !mask[[y, x + 1]]);
            out[[y, x]] = on_edge || has_bg_neighbor;
        }
    }
    out
}

const EDT_INF: f64 = 1e20;

/// Horizontal position where the parabolas rooted at `q` and `p` intersect.
#[inline]
fn parabola_intersection(f: &[f64], q: usize, p: usize) -> f64 {
    ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * q - 2 * p) as f64
}

/// 1D squared distance transform (lower envelope of parabolas).
///
/// With `f` values bounded by [`EDT_INF`] and realistic lengths, every
/// intersection lies strictly inside (-EDT_INF, EDT_INF), so `k` cannot
/// underflow past the sentinel boundary.
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -EDT_INF;
    z[1] = EDT_INF;
    for q in 1..n {
        let mut s = parabola_intersection(f, q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = parabola_intersection(f, q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = EDT_INF;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// site. Pixels are treated as lattice points; all-false input gives EDT_INF.
pub fn squared_edt(sites: &Array2<bool>) -> Array2<f64> {
    let (h, w) = sites.dim();
    let mut dist = Array2::<f64>::zeros((h, w));
    // pass 1: along columns
    let mut col_f = vec![0.0; h];
    let mut col_d = vec![0.0; h];
    let mut v = vec![0usize; h.max(w)];
    let mut z = vec![0.0; h.max(w) + 1];
    for x in 0..w {
        for y in 0..h {
            col_f[y] = if sites[[y, x]] { 0.0 } else { EDT_INF };
        }
        edt_1d(&col_f, &mut col_d, &mut v, &mut z);
        for y in 0..h {
            dist[[y, x]] = col_d[y];
        }
    }
    // pass 2: along rows
    let mut row_f = vec![0.0; w];
    let mut row_d = vec![0.0; w];
    for y in 0..h {
        for x in 0..w {
            row_f[x] = dist[[y, x]];
        }
        edt_1d(&row_f, &mut row_d, &mut v, &mut z);
        for x in 0..w {
            dist[[y, x]] = row_d[x];
        }
    }
    dist
}

/// Euclidean distances from each boundary point of `from` to the nearest
/// boundary point of `to`. `None` when either boundary is empty.
fn directed_surface_distances(
    from_boundary: &Array2<bool>,
    to_boundary: &Array2<bool>,
) -> Option<Vec<f64>> {
    if !from_boundary.iter().any(|&v| v) || !to_boundary.iter().any(|&v| v) {
        return None;
    }
    let sq = squared_edt(to_boundary);
    let mut out = Vec::new();
    for ((y, x), &is_b) in from_boundary.indexed_iter() {
        if is_b {
            out.push(sq[[y, x]].sqrt());
        }
    }
    Some(out)
}

/// 95th-percentile Hausdorff distance between the boundaries of two masks,
/// in pixels. `None` when either mask is empty.
pub fn hd95(a: &ArrayView2<bool>, b: &ArrayView2<bool>) -> Option<f64> {
    hd95_with(a, b, Hd95Combine::MaxOfDirected)
}

pub fn hd95_with(a: &ArrayView2<bool>, b: &ArrayView2<bool>, combine: Hd95Combine) -> Option<f64> {
    let ba = boundary_of(a);
    let bb = boundary_of(b);
    let d_ab = directed_surface_distances(&ba, &bb)?;
    let d_ba = directed_surface_distances(&bb, &ba)?;
    Some(match combine {
        Hd95Combine::MaxOfDirected => {
            let p_ab = linear_percentile(&d_ab, 95.0);
            let p_ba = linear_percentile(&d_ba, 95.0);
            p_ab.max(p_ba)
        }
        Hd95Combine::Pooled => {
            let mut pooled = d_ab;
            pooled.extend(d_ba);
            linear_percentile(&pooled, 95.0)
        }
    })
}

/// Average symmetric surface distance between the boundaries of two masks,
/// in pixels. `None` when either mask is empty.
pub fn asd(a: &ArrayView2<bool>, b: &ArrayView2<bool>) -> Option<f64> {
    let ba = boundary_of(a);
    let bb = boundary_of(b);
    let d_ab = directed_surface_distances(&ba, &bb)?;
    let d_ba = directed_surface_distances(&bb, &ba)?;
    let total: f64 = d_ab.iter().sum::<f64>() + d_ba.iter().sum::<f64>();
    Some(total / (d_ab.len() + d_ba.len()) as f64)
}

// ---------------------------------------------------------------------------
// Pseudo-label diagnostics
// ---------------------------------------------------------------------------

/// 1 where the pseudo-label disagrees with the ground truth.
pub fn pseudo_label_error_map(pseudo: &Array3<u8>, gt: &Array3<u8>) -> Array3<u8> {
    assert_eq!(pseudo.dim(), gt.dim(), "pseudo/gt shape mismatch");
    let mut out = Array3::<u8>::zeros(pseudo.dim());
    for ((dst, &p), &g) in out.iter_mut().zip(pseudo.iter()).zip(gt.iter()) {
        *dst = u8::from(p != g);
    }
    out
}

/// Fraction of error pixels that fall inside the mask; `None` when there are
/// no error pixels.
pub fn error_recall_within_mask(errors: &Array3<u8>, mask: &RegionMask) -> Option<f64> {
    assert_eq!(errors.dim(), mask.values.dim());
    let mut n_err = 0usize;
    let mut n_hit = 0usize;
    for (&e, &m) in errors.iter().zip(mask.values.iter()) {
        if e == 1 {
            n_err += 1;
            if m == 1 {
                n_hit += 1;
            }
        }
    }
    if n_err == 0 {
        None
    } else {
        Some(n_hit as f64 / n_err as f64)
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Default)]
struct ClassAccumulator {
    dice_sum: f64,
    jaccard_sum: f64,
    n_overlap: usize,
    hd_sum: f64,
    asd_sum: f64,
    n_distance: usize,
    n_distance_missing: usize,
}

/// Evaluate predictions against ground truth over a labeled dataset.
///
/// Per class, overlap metrics average over all samples and distance metrics
/// over the samples where both masks are nonempty; the `mean` block averages
/// the per-class results over foreground classes.
pub fn evaluate_with<F>(
    mut predict: F,
    samples: &[Sample],
    num_classes: usize,
) -> Result<MetricsRecord>
where
    F: FnMut(&Sample) -> Result<Array2<u8>>,
{
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    if samples.iter().any(|s| s.label.is_none()) {
        return Err(Error::Config(
            "evaluation requires a fully labeled dataset".into(),
        ));
    }

    let mut acc: BTreeMap<usize, ClassAccumulator> = BTreeMap::new();
    for c in 0..num_classes {
        acc.insert(c, ClassAccumulator::default());
    }

    for sample in samples {
        let pred = predict(sample)?;
        let gt = sample.label.as_ref().expect("checked labeled");
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs label {:?} for sample {}",
                pred.dim(),
                gt.dim(),
                sample.id
            )));
        }

        for c in 0..num_classes {
            let a = pred.mapv(|v| v as usize == c);
            let b = gt.mapv(|v| v as usize == c);
            let (av, bv) = (a.view(), b.view());
            let entry = acc.get_mut(&c).expect("accumulator preset");
            entry.dice_sum += dice(&av, &bv);
            entry.jaccard_sum += jaccard(&av, &bv);
            entry.n_overlap += 1;
            match (hd95(&av, &bv), asd(&av, &bv)) {
                (Some(h), Some(s)) => {
                    entry.hd_sum += h;
                    entry.asd_sum += s;
                    entry.n_distance += 1;
                }
                _ => entry.n_distance_missing += 1,
            }
        }
    }

    let mut per_class = BTreeMap::new();
    for (c, a) in &acc {
        per_class.insert(
            *c,
            ClassMetrics {
                dice: a.dice_sum / a.n_overlap as f64,
                jaccard: a.jaccard_sum / a.n_overlap as f64,
                hd95: (a.n_distance > 0).then(|| a.hd_sum / a.n_distance as f64),
                asd: (a.n_distance > 0).then(|| a.asd_sum / a.n_distance as f64),
                n_distance_missing: a.n_distance_missing,
            },
        );
    }

    // mean over foreground classes
    let foreground: Vec<&ClassMetrics> = per_class
        .iter()
        .filter(|(c, _)| **c >= 1)
        .map(|(_, m)| m)
        .collect();
    let nf = foreground.len() as f64;
    let hd_defined: Vec<f64> = foreground.iter().filter_map(|m| m.hd95).collect();
    let asd_defined: Vec<f64> = foreground.iter().filter_map(|m| m.asd).collect();
    let mean = ClassMetrics {
        dice: foreground.iter().map(|m| m.dice).sum::<f64>() / nf,
        jaccard: foreground.iter().map(|m| m.jaccard).sum::<f64>() / nf,
        hd95: (!hd_defined.is_empty())
            .then(|| hd_defined.iter().sum::<f64>() / hd_defined.len() as f64),
        asd: (!asd_defined.is_empty())
            .then(|| asd_defined.iter().sum::<f64>() / asd_defined.len() as f64),
        n_distance_missing: foreground.iter().map(|m| m.n_distance_missing).sum(),
    };

    Ok(MetricsRecord {
        per_class,
        mean,
        n_samples: samples.len(),
    })
}

/// Evaluate a network's argmax predictions over a labeled dataset.
pub fn evaluate(net: &Network, samples: &[Sample], num_classes: usize) -> Result<MetricsRecord> {
    if net.config().num_classes != num_classes {
        return Err(Error::Shape(format!(
            "network predicts {} classes, evaluation expects {num_classes}",
            net.config().num_classes
        )));
    }
    evaluate_with(|s| predict_labels(net, s), samples, num_classes)
}

/// Predicted class map of one sample (argmax of the softmax output).
pub fn predict_labels(net: &Network, sample: &Sample) -> Result<Array2<u8>> {
    let images = crate::datasets::image_batch(std::slice::from_ref(sample), &[0]);
    let logits = net.forward(&images)?;
    let probs = softmax(&logits);
    let (_, c_dim, h, w) = probs.values.dim();
    let mut pred = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = probs.values[[0, 0, y, x]];
            for ci in 1..c_dim {
                let v = probs.values[[0, ci, y, x]];
                if v > best_v {
                    best = ci;
                    best_v = v;
                }
            }
            pred[[y, x]] = best as u8;
        }
    }
    Ok(pred)
}

#[cfg(test)]
mod tests;
