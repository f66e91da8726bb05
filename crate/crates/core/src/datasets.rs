//! Synthetic segmentation data, the on-disk container, and split manifests.
//!
//! The generator draws nested-ellipse phantoms that mimic a cardiac short-axis
//! topology: an outer annulus (class `C-1`), its interior band(s), and an inner
//! disk (class 1) on background (class 0). Class regions are intensity-coded so
//! the task is separable by construction; boundary blur and pixel noise make
//! the class edges genuinely ambiguous, which is where high prediction entropy
//! is expected to concentrate.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of a generated pool reserved for validation.
pub const VAL_FRACTION: f64 = 0.10;
/// Fraction of a generated pool reserved for testing.
pub const TEST_FRACTION: f64 = 0.20;

/// Parameters of the synthetic phantom generator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Class count including background.
    pub num_classes: usize,
    pub num_samples: usize,
    /// Gaussian blur applied to the rendered intensities, in pixels.
    pub boundary_blur_sigma: f64,
    /// Std of additive Gaussian pixel noise, as a fraction of dynamic range.
    pub intensity_noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 128,
            num_classes: 4,
            num_samples: 200,
            boundary_blur_sigma: 1.5,
            intensity_noise_std: 0.08,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "image_size {} too small for nested structures (min 8)",
                self.image_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.num_classes > 255 {
            return Err(Error::Config("num_classes must fit in u8 labels".into()));
        }
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be positive".into()));
        }
        if self.boundary_blur_sigma < 0.0 || !self.boundary_blur_sigma.is_finite() {
            return Err(Error::Config("boundary_blur_sigma must be >= 0".into()));
        }
        if self.intensity_noise_std < 0.0 || !self.intensity_noise_std.is_finite() {
            return Err(Error::Config("intensity_noise_std must be >= 0".into()));
        }
        Ok(())
    }

    /// Deterministic base intensity for class `c`, evenly spaced in [0.15, 0.95].
    pub fn class_intensity(&self, class: usize) -> f64 {
        0.15 + 0.8 * class as f64 / (self.num_classes - 1) as f64
    }
}

/// One image with an optional ground-truth label map.
///
/// `label` is `Some` exactly when the sample belongs to the labeled pool.
/// Synthetic generation stores labels for every sample; the split manifest
/// decides which of them training is allowed to see.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[C_in, H, W]`, intensities in `[0, 1]`.
    pub image: Array3<f32>,
    /// `[H, W]` class ids, when present.
    pub label: Option<Array2<u8>>,
    pub id: String,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }
}

/// Deterministic labeled/unlabeled partition of a training pool.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitManifest {
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub ratio: f64,
    pub seed: u64,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SplitManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

struct EllipseStack {
    /// Region centers, outermost first; nested by construction.
    centers: Vec<(f64, f64)>,
    /// Scale factor of each nested ellipse relative to (a, b).
    kappas: Vec<f64>,
    semi_a: f64,
    semi_b: f64,
    cos_t: f64,
    sin_t: f64,
}

impl EllipseStack {
    fn draw(rng: &mut ChaCha8Rng, size: f64, num_classes: usize) -> EllipseStack {
        let semi_a = size * rng.random_range(0.22..0.36);
        let semi_b = size * rng.random_range(0.22..0.36);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let cx = size * rng.random_range(0.42..0.58);
        let cy = size * rng.random_range(0.42..0.58);

        let regions = num_classes - 1;
        let kappas: Vec<f64> = if regions == 1 {
            vec![1.0]
        } else {
            (0..regions)
                .map(|i| 1.0 - 0.62 * i as f64 / (regions - 1) as f64)
                .collect()
        };

        // Jitter nested centers while preserving containment: in the
        // elliptical norm, region i stays inside region i-1 as long as the
        // center offset is below kappa[i-1] - kappa[i].
        let (cos_t, sin_t) = (theta.cos(), theta.sin());
        let mut centers = vec![(cx, cy)];
        for i in 1..regions {
            let gap = kappas[i - 1] - kappas[i];
            let mag = rng.random_range(0.0..0.35 * gap);
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let (ex, ey) = (mag * phi.cos() * semi_a, mag * phi.sin() * semi_b);
            let prev = centers[i - 1];
            centers.push((
                prev.0 + ex * cos_t - ey * sin_t,
                prev.1 + ex * sin_t + ey * cos_t,
            ));
        }

        EllipseStack {
            centers,
            kappas,
            semi_a,
            semi_b,
            cos_t,
            sin_t,
        }
    }

    /// Elliptical norm of pixel (x, y) relative to region `i`'s center.
    fn norm(&self, i: usize, x: f64, y: f64) -> f64 {
        let dx = x - self.centers[i].0;
        let dy = y - self.centers[i].1;
        let u = (dx * self.cos_t + dy * self.sin_t) / self.semi_a;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.semi_b;
        (u * u + v * v).sqrt()
    }

    /// Class id at pixel (x, y): number of nested regions containing it,
    /// mapped so the innermost region is class 1 and the outer annulus is
    /// class `C-1`.
    fn class_at(&self, num_classes: usize, x: f64, y: f64) -> u8 {
        let mut contained = 0;
        for i in 0..self.kappas.len() {
            if self.norm(i, x, y) <= self.kappas[i] {
                contained = i + 1;
            } else {
                break;
            }
        }
        if contained == 0 {
            0
        } else {
            (num_classes - contained) as u8
        }
    }
}

/// Separable Gaussian blur with clamp-to-edge boundaries. No-op for sigma <= 0.
fn gaussian_blur_inplace(img: &mut Array2<f64>, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for k in -radius..=radius {
        kernel.push((-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for w in kernel.iter_mut() {
        *w /= norm;
    }

    let (h, w) = img.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kw) in kernel.iter().enumerate() {
                let xi = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += kw * img[[y, xi]];
            }
            tmp[[y, x]] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kw) in kernel.iter().enumerate() {
                let yi = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kw * tmp[[yi, x]];
            }
            img[[y, x]] = acc;
        }
    }
}

/// Generate the full synthetic pool. Every sample carries its ground-truth
/// label; callers hide labels according to a [`SplitManifest`].
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = if spec.intensity_noise_std > 0.0 {
        Some(Normal::new(0.0, spec.intensity_noise_std).expect("validated std"))
    } else {
        None
    };

    let mut samples = Vec::with_capacity(spec.num_samples);
    for sample_idx in 0..spec.num_samples {
        let stack = EllipseStack::draw(&mut rng, size as f64, spec.num_classes);

        // Per-sample intensity jitter, small enough that nearest-base-intensity
        // classification still recovers the class exactly.
        let jitter: Vec<f64> = (0..spec.num_classes)
            .map(|_| rng.random_range(-0.03..0.03))
            .collect();

        let mut label = Array2::<u8>::zeros((size, size));
        let mut intensity = Array2::<f64>::zeros((size, size));
        for y in 0..size {
            for x in 0..size {
                let class = stack.class_at(spec.num_classes, x as f64 + 0.5, y as f64 + 0.5);
                label[[y, x]] = class;
                intensity[[y, x]] = spec.class_intensity(class as usize) + jitter[class as usize];
            }
        }

        gaussian_blur_inplace(&mut intensity, spec.boundary_blur_sigma);
        if let Some(dist) = &noise {
            for v in intensity.iter_mut() {
                *v += dist.sample(&mut rng);
            }
        }

        let mut image = Array3::<f32>::zeros((1, size, size));
        for y in 0..size {
            for x in 0..size {
                image[[0, y, x]] = intensity[[y, x]].clamp(0.0, 1.0) as f32;
            }
        }

        samples.push(Sample {
            image,
            label: Some(label),
            id: format!("synth-{sample_idx:05}"),
        });
    }
    Ok(samples)
}

/// Deterministic train/val/test partition of a generated pool.
///
/// Test takes `TEST_FRACTION`, validation `VAL_FRACTION`, train the rest;
/// assignment shuffles the pool with its own seeded stream so the three
/// subsets are disjoint and cover the pool.
pub fn split_train_val_test(samples: Vec<Sample>, seed: u64) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let n = samples.len();
    let n_test = ((TEST_FRACTION * n as f64).round() as usize).min(n);
    let n_val = ((VAL_FRACTION * n as f64).round() as usize).min(n - n_test);

    let mut order: Vec<usize> = (0..n).collect();
    // Separate stream from the generator's so regenerating with the same seed
    // cannot entangle geometry draws with split assignment.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ POOL_SPLIT_STREAM);
    order.shuffle(&mut rng);

    let mut slots = vec![2u8; n]; // 2 = train
    for &i in order.iter().take(n_test) {
        slots[i] = 0;
    }
    for &i in order.iter().skip(n_test).take(n_val) {
        slots[i] = 1;
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (sample, slot) in samples.into_iter().zip(slots) {
        match slot {
            0 => test.push(sample),
            1 => val.push(sample),
            _ => train.push(sample),
        }
    }
    (train, val, test)
}

const POOL_SPLIT_STREAM: u64 = 0x7ab1_e55e_ed51_1u64;

/// Shuffled labeled/unlabeled split of a training pool.
pub fn split_labeled_unlabeled(ids: &[String], ratio: f64, seed: u64) -> Result<SplitManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "labeled ratio must be in (0, 1), got {ratio}"
        )));
    }
    if ids.is_empty() {
        return Err(Error::Config("cannot split an empty id list".into()));
    }
    let n_labeled = (ratio * ids.len() as f64).round() as usize;
    if n_labeled == 0 {
        return Err(Error::Config(format!(
            "ratio {ratio} yields zero labeled samples out of {}",
            ids.len()
        )));
    }

    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let unlabeled_ids = shuffled.split_off(n_labeled.min(shuffled.len()));
    Ok(SplitManifest {
        labeled_ids: shuffled,
        unlabeled_ids,
        ratio,
        seed,
    })
}

// ---------------------------------------------------------------------------
// On-disk container
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    id: String,
    image_shape: Vec<usize>,
    image_dtype: String,
    has_label: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct DirManifest {
    format_version: u32,
    samples: Vec<SampleMeta>,
}

const FORMAT_VERSION: u32 = 1;

fn image_file(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.image.raw"))
}

fn label_file(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.label.raw"))
}

/// Write one split directory: a JSON manifest plus raw little-endian f32
/// image tensors and u8 label maps.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metas: Vec<SampleMeta> = samples
        .iter()
        .map(|s| SampleMeta {
            id: s.id.clone(),
            image_shape: s.image.shape().to_vec(),
            image_dtype: "f32le".into(),
            has_label: s.label.is_some(),
        })
        .collect();

    for sample in samples {
        let path = image_file(dir, &sample.id);
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut bytes = Vec::with_capacity(sample.image.len() * 4);
        for v in sample.image.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes).map_err(|e| Error::io(&path, e))?;

        if let Some(label) = &sample.label {
            let path = label_file(dir, &sample.id);
            let data: Vec<u8> = label.iter().copied().collect();
            fs::write(&path, data).map_err(|e| Error::io(&path, e))?;
        }
    }

    let manifest = DirManifest {
        format_version: FORMAT_VERSION,
        samples: metas,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Load one split directory written by [`save_dataset`].
///
/// A sample whose manifest entry records no label file comes back unlabeled.
/// Size mismatches between the manifest shape and the raw file are format
/// errors naming the offending sample id.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DirManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            id: "<manifest>".into(),
            msg: format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        });
    }

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for meta in &manifest.samples {
        if meta.image_shape.len() != 3 {
            return Err(Error::Format {
                id: meta.id.clone(),
                msg: format!("image_shape must be [C,H,W], got {:?}", meta.image_shape),
            });
        }
        if meta.image_dtype != "f32le" {
            return Err(Error::Format {
                id: meta.id.clone(),
                msg: format!("unsupported image_dtype {:?}", meta.image_dtype),
            });
        }
        let (c, h, w) = (meta.image_shape[0], meta.image_shape[1], meta.image_shape[2]);
        let numel = c * h * w;

        let path = image_file(dir, &meta.id);
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&path, e))?;
        if bytes.len() != numel * 4 {
            return Err(Error::Format {
                id: meta.id.clone(),
                msg: format!(
                    "image file holds {} bytes, manifest shape {:?} needs {}",
                    bytes.len(),
                    meta.image_shape,
                    numel * 4
                ),
            });
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|chunk| f32::from_le_bytes(chunk.try_into().expect("chunk of 4")))
            .collect();
        let image = Array3::from_shape_vec((c, h, w), values).expect("length checked");

        let label = if meta.has_label {
            let path = label_file(dir, &meta.id);
            let data = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if data.len() != h * w {
                return Err(Error::Format {
                    id: meta.id.clone(),
                    msg: format!("label file holds {} bytes, expected {}", data.len(), h * w),
                });
            }
            Some(Array2::from_shape_vec((h, w), data).expect("length checked"))
        } else {
            None
        };

        samples.push(Sample {
            image,
            label,
            id: meta.id.clone(),
        });
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Cyclic shuffled index stream over a pool; reshuffles at every epoch
/// boundary from its own seeded rng, so batch order is a pure function of
/// (pool size, seed).
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

/// Serializable sampler state for training checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SamplerState {
    pub order: Vec<usize>,
    pub cursor: usize,
    pub rng: crate::util::RngSnapshot,
}

impl BatchSampler {
    pub fn new(pool_size: usize, seed: u64) -> BatchSampler {
        assert!(pool_size > 0, "sampler over empty pool");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..pool_size).collect();
        order.shuffle(&mut rng);
        BatchSampler {
            order,
            cursor: 0,
            rng,
        }
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            order: self.order.clone(),
            cursor: self.cursor,
            rng: crate::util::RngSnapshot::capture(&self.rng),
        }
    }

    pub fn from_state(state: SamplerState) -> BatchSampler {
        BatchSampler {
            order: state.order,
            cursor: state.cursor,
            rng: state.rng.restore(),
        }
    }
}

/// Assemble `[B, C, H, W]` f64 image batch from pool indices.
pub fn image_batch(samples: &[Sample], idxs: &[usize]) -> Array4<f64> {
    let (c, h, w) = (
        samples[idxs[0]].channels(),
        samples[idxs[0]].height(),
        samples[idxs[0]].width(),
    );
    let mut out = Array4::<f64>::zeros((idxs.len(), c, h, w));
    for (b, &i) in idxs.iter().enumerate() {
        for (dst, src) in out
            .index_axis_mut(ndarray::Axis(0), b)
            .iter_mut()
            .zip(samples[i].image.iter())
        {
            *dst = *src as f64;
        }
    }
    out
}

/// Assemble `[B, H, W]` label batch; panics if any referenced sample is
/// unlabeled (callers batch from the labeled pool only).
pub fn label_batch(samples: &[Sample], idxs: &[usize]) -> Array3<u8> {
    let (h, w) = (samples[idxs[0]].height(), samples[idxs[0]].width());
    let mut out = Array3::<u8>::zeros((idxs.len(), h, w));
    for (b, &i) in idxs.iter().enumerate() {
        let label = samples[i]
            .label
            .as_ref()
            .expect("label_batch over labeled pool");
        out.index_axis_mut(ndarray::Axis(0), b).assign(label);
    }
    out
}

/// Random horizontal/vertical flip and 90-degree rotation, applied jointly to
/// one image slice and its label slice. Off by default in training config.
pub fn augment_flip_rot(
    image: &mut Array3<f64>,
    label: Option<&mut Array2<u8>>,
    rng: &mut ChaCha8Rng,
) {
    let hflip = rng.random_bool(0.5);
    let vflip = rng.random_bool(0.5);
    let quarter_turns = rng.random_range(0..4u32);

    let (c, h, w) = image.dim();
    assert_eq!(h, w, "rotation augmentation requires square images");

    let map = |y: usize, x: usize| -> (usize, usize) {
        let (mut yy, mut xx) = (y, x);
        if hflip {
            xx = w - 1 - xx;
        }
        if vflip {
            yy = h - 1 - yy;
        }
        for _ in 0..quarter_turns {
            let (ny, nx) = (xx, h - 1 - yy);
            yy = ny;
            xx = nx;
        }
        (yy, xx)
    };

    let orig = image.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = map(y, x);
                image[[ch, y, x]] = orig[[ch, sy, sx]];
            }
        }
    }
    if let Some(label) = label {
        let orig = label.clone();
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = map(y, x);
                label[[y, x]] = orig[[sy, sx]];
            }
        }
    }
}

/// Ids of a sample list, in order.
pub fn ids_of(samples: &[Sample]) -> Vec<String> {
    samples.iter().map(|s| s.id.clone()).collect()
}


/// Check a manifest partitions `ids` (disjoint and covering).
pub fn manifest_partitions(manifest: &SplitManifest, ids: &[String]) -> bool {
    let labeled: BTreeSet<_> = manifest.labeled_ids.iter().collect();
    let unlabeled: BTreeSet<_> = manifest.unlabeled_ids.iter().collect();
    if !labeled.is_disjoint(&unlabeled) {
        return false;
    }
    let all: BTreeSet<_> = ids.iter().collect();
    let union: BTreeSet<_> = labeled.union(&unlabeled).copied().collect();
    all == union && labeled.len() + unlabeled.len() == ids.len()
}
