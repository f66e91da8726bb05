//! Two-phase training: supervised pretraining of the teacher on labeled data,
//! then semi-supervised student training with pseudo-labels from an EMA
//! teacher.
//!
//! Every iteration of the semi phase draws one labeled and one unlabeled
//! batch. The labeled batch gets the configured region weighting from the
//! student's own entropy at `q_sup`; the unlabeled batch gets teacher
//! pseudo-labels masked by teacher entropy at `q_unsup`. The student takes
//! one SGD-with-momentum step on the combined loss and the teacher follows by
//! exponential moving average. All randomness flows from `TrainConfig::seed`
//! through dedicated ChaCha streams, so runs are bit-reproducible and
//! checkpoints resume exactly.

pub mod checkpoint;

use ndarray::{Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{augment_flip_rot, BatchSampler, Sample};
use crate::error::{Error, Result};
use crate::model::{init_network, softmax, Gradients, Network, NetworkConfig};
use crate::region::{
    generate_pseudo_labels, region_loss_with_logit_grad, split_regions, LossBreakdown,
    RegionWeighting,
};
use crate::uncertainty::{entropy_map, region_mask, PercentileScope};

// Distinct seed streams derived from the run seed.
const PRETRAIN_SAMPLER_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const SEMI_LABELED_STREAM: u64 = 0x6a09_e667_f3bc_c908;
const SEMI_UNLABELED_STREAM: u64 = 0xbb67_ae85_84ca_a73b;
const AUX_STREAM: u64 = 0x3c6e_f372_fe94_f82b;

/// Which update rule couples the teacher to the student.
///
/// The smoothing coefficient is `lambda = min(step/(step+1), ema_cap)` in
/// both cases; the conventions differ in which side `lambda` weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmaConvention {
    /// `teacher = lambda * teacher + (1 - lambda) * student`; the teacher is
    /// a slow moving average once lambda reaches the cap.
    #[default]
    Standard,
    /// `teacher = (1 - lambda) * teacher + lambda * student`, as printed in
    /// some formulations; the teacher tracks the student almost immediately.
    Paper,
}

/// Region weighting applied to one data stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionStrategy {
    Url,
    Crl,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct AblationFlags {
    /// Region weighting on the labeled stream; `false` = plain hybrid loss.
    pub url_on: bool,
    /// Region weighting on the unlabeled stream; `false` = plain pseudo-label loss.
    pub crl_on: bool,
    /// Exclude the alpha-weighted region of the unlabeled stream entirely
    /// (hard filtering instead of soft down-weighting).
    pub remove_unreliable: bool,
    /// Generate pseudo-labels from the pretrained teacher snapshot instead of
    /// the evolving EMA teacher.
    pub freeze_pseudo_labels: bool,
    pub region_strategy_labeled: RegionStrategy,
    pub region_strategy_unlabeled: RegionStrategy,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            url_on: true,
            crl_on: true,
            remove_unreliable: false,
            freeze_pseudo_labels: false,
            region_strategy_labeled: RegionStrategy::Url,
            region_strategy_unlabeled: RegionStrategy::Crl,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    /// Entropy percentile for the labeled stream (supervised phase).
    pub q_sup: f64,
    /// Entropy percentile for the unlabeled stream (self-training phase).
    pub q_unsup: f64,
    /// Weight of the down-weighted region in [0, 1].
    pub alpha: f64,
    pub labeled_ratio: f64,
    pub pretrain_iters: usize,
    pub semi_iters: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr: f64,
    pub momentum: f64,
    pub ema_cap: f64,
    pub ema_convention: EmaConvention,
    pub percentile_scope: PercentileScope,
    pub augment: bool,
    pub seed: u64,
    pub net: NetworkConfig,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            q_sup: 95.0,
            q_unsup: 99.0,
            alpha: 0.5,
            labeled_ratio: 0.1,
            pretrain_iters: 600,
            semi_iters: 1200,
            batch_labeled: 8,
            batch_unlabeled: 8,
            lr: 0.003,
            momentum: 0.9,
            ema_cap: 0.99,
            ema_convention: EmaConvention::default(),
            percentile_scope: PercentileScope::default(),
            augment: false,
            seed: 0,
            net: NetworkConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, q) in [("q_sup", self.q_sup), ("q_unsup", self.q_unsup)] {
            if !(q > 0.0 && q < 100.0) {
                return Err(Error::Config(format!("{name} must be in (0, 100), got {q}")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio < 1.0) {
            return Err(Error::Config(format!(
                "labeled_ratio must be in (0, 1), got {}",
                self.labeled_ratio
            )));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.ema_cap > 0.0 && self.ema_cap <= 1.0) {
            return Err(Error::Config(format!(
                "ema_cap must be in (0, 1], got {}",
                self.ema_cap
            )));
        }
        self.net.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Semi,
}

/// One JSON-lines entry of the training metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub phase: Phase,
    pub loss_total: f64,
    pub labeled: LossBreakdown,
    pub unlabeled: Option<LossBreakdown>,
    pub mask_density_labeled: Option<f64>,
    pub mask_density_unlabeled: Option<f64>,
    pub lambda: Option<f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Mutable training state of the semi-supervised phase. The teacher is only
/// ever written by [`ema_update`]; the optimizer touches the student alone.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: Network,
    pub teacher: Network,
    pub step: u64,
    pub momentum_buf: Vec<f64>,
    pub labeled_sampler: BatchSampler,
    pub unlabeled_sampler: Option<BatchSampler>,
    pub aux_rng: ChaCha8Rng,
    pub frozen_teacher: Option<Network>,
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

fn sgd_step(net: &mut Network, grads: &Gradients, momentum_buf: &mut [f64], lr: f64, momentum: f64) {
    let params = net.params_mut();
    for ((p, v), g) in params
        .iter_mut()
        .zip(momentum_buf.iter_mut())
        .zip(grads.values.iter())
    {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// EMA coupling of the teacher to the student; returns the lambda applied.
pub fn ema_update(
    teacher: &mut Network,
    student: &Network,
    step: u64,
    ema_cap: f64,
    convention: EmaConvention,
) -> Result<f64> {
    if teacher.num_params() != student.num_params() || teacher.config() != student.config() {
        return Err(Error::Shape(
            "teacher and student parameter shapes differ".into(),
        ));
    }
    let lambda = (step as f64 / (step as f64 + 1.0)).min(ema_cap);
    let (w_old, w_new) = match convention {
        EmaConvention::Standard => (lambda, 1.0 - lambda),
        EmaConvention::Paper => (1.0 - lambda, lambda),
    };
    for (t, s) in teacher.params_mut().iter_mut().zip(student.params()) {
        *t = w_old * *t + w_new * *s;
    }
    Ok(lambda)
}

/// Assemble a batch, optionally with flip/rotation augmentation applied
/// jointly to each image and its label.
fn assemble_batch(
    samples: &[Sample],
    idxs: &[usize],
    with_labels: bool,
    augment: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Array4<f64>, Option<Array3<u8>>)> {
    let first = &samples[idxs[0]];
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut images = Array4::<f64>::zeros((idxs.len(), c, h, w));
    let mut labels = with_labels.then(|| Array3::<u8>::zeros((idxs.len(), h, w)));

    for (b, &i) in idxs.iter().enumerate() {
        let sample = &samples[i];
        let mut img = Array3::<f64>::zeros((c, h, w));
        for (dst, src) in img.iter_mut().zip(sample.image.iter()) {
            *dst = *src as f64;
        }
        let mut lbl: Option<Array2<u8>> = if with_labels {
            Some(
                sample
                    .label
                    .clone()
                    .ok_or_else(|| Error::Config(format!("sample {} has no label", sample.id)))?,
            )
        } else {
            None
        };
        if augment {
            augment_flip_rot(&mut img, lbl.as_mut(), rng);
        }
        images.index_axis_mut(ndarray::Axis(0), b).assign(&img);
        if let (Some(all), Some(l)) = (labels.as_mut(), lbl) {
            all.index_axis_mut(ndarray::Axis(0), b).assign(&l);
        }
    }
    Ok((images, labels))
}

fn stream_weighting(enabled: bool, strategy: RegionStrategy) -> RegionWeighting {
    if !enabled {
        RegionWeighting::Plain
    } else {
        match strategy {
            RegionStrategy::Url => RegionWeighting::Url,
            RegionStrategy::Crl => RegionWeighting::Crl,
        }
    }
}

/// Forward + region loss + backward for one labeled batch against a network.
/// Returns (loss breakdown, mask density, parameter gradients).
fn labeled_stream_grads(
    net: &Network,
    images: &Array4<f64>,
    labels: &Array3<u8>,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, f64, Gradients)> {
    let (logits, trace) = net.forward_trace(images)?;
    let probs = softmax(&logits);
    let entropy = entropy_map(&probs);
    let mask = region_mask(&entropy, cfg.q_sup, cfg.percentile_scope)?;
    let density = mask.density();
    let splits = split_regions(labels, &mask, cfg.net.num_classes)?;
    let weighting = stream_weighting(cfg.ablation.url_on, cfg.ablation.region_strategy_labeled);
    let (breakdown, dlogits) =
        region_loss_with_logit_grad(&probs, &splits, cfg.alpha, weighting)?;
    let grads = net.backward(&trace, &dlogits);
    Ok((breakdown, density, grads))
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

/// Supervised pretraining of the teacher on the labeled pool.
pub fn pretrain_teacher(
    labeled: &[Sample],
    cfg: &TrainConfig,
) -> Result<(Network, Vec<LogRecord>)> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Config("labeled pool is empty".into()));
    }
    let mut net = init_network(cfg.net.clone())?;
    let mut momentum_buf = vec![0.0; net.num_params()];
    let mut sampler = BatchSampler::new(labeled.len(), cfg.seed ^ PRETRAIN_SAMPLER_STREAM);
    let mut aux_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AUX_STREAM);

    let mut logs = Vec::with_capacity(cfg.pretrain_iters);
    for step in 0..cfg.pretrain_iters {
        let idxs = sampler.next_batch(cfg.batch_labeled);
        let (images, labels) =
            assemble_batch(labeled, &idxs, true, cfg.augment, &mut aux_rng)?;
        let labels = labels.expect("labeled batch");
        let (breakdown, density, grads) = labeled_stream_grads(&net, &images, &labels, cfg)?;
        sgd_step(&mut net, &grads, &mut momentum_buf, cfg.lr, cfg.momentum);
        logs.push(LogRecord {
            step: step as u64,
            phase: Phase::Pretrain,
            loss_total: breakdown.total,
            labeled: breakdown,
            unlabeled: None,
            mask_density_labeled: Some(density),
            mask_density_unlabeled: None,
            lambda: None,
            lr: cfg.lr,
            warning: None,
        });
    }
    Ok((net, logs))
}

// ---------------------------------------------------------------------------
// Semi-supervised phase
// ---------------------------------------------------------------------------

/// Step-wise driver of the semi-supervised phase; owns the [`TrainState`] so
/// callers can checkpoint and resume between steps.
pub struct SemiTrainer {
    cfg: TrainConfig,
    state: TrainState,
    warned_no_unlabeled: bool,
}

impl SemiTrainer {
    /// Start the semi phase from a pretrained teacher. The student begins as
    /// an exact copy of the teacher.
    pub fn new(
        teacher0: Network,
        cfg: &TrainConfig,
        n_labeled: usize,
        n_unlabeled: usize,
    ) -> Result<SemiTrainer> {
        cfg.validate()?;
        if n_labeled == 0 {
            return Err(Error::Config("labeled pool is empty".into()));
        }
        if teacher0.config() != &cfg.net {
            return Err(Error::Config(
                "pretrained teacher config does not match train config".into(),
            ));
        }
        let student = teacher0.clone();
        let n_params = student.num_params();
        let frozen_teacher = cfg
            .ablation
            .freeze_pseudo_labels
            .then(|| teacher0.clone());
        Ok(SemiTrainer {
            cfg: cfg.clone(),
            state: TrainState {
                student,
                teacher: teacher0,
                step: 0,
                momentum_buf: vec![0.0; n_params],
                labeled_sampler: BatchSampler::new(n_labeled, cfg.seed ^ SEMI_LABELED_STREAM),
                unlabeled_sampler: (n_unlabeled > 0)
                    .then(|| BatchSampler::new(n_unlabeled, cfg.seed ^ SEMI_UNLABELED_STREAM)),
                aux_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ AUX_STREAM ^ 1),
                frozen_teacher,
            },
            warned_no_unlabeled: false,
        })
    }

    /// Resume from a checkpointed state.
    pub fn resume(state: TrainState, cfg: &TrainConfig) -> Result<SemiTrainer> {
        cfg.validate()?;
        Ok(SemiTrainer {
            cfg: cfg.clone(),
            state,
            warned_no_unlabeled: false,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// The gradient half of one iteration: draws batches, computes the
    /// combined loss, and updates the student. The teacher is not touched.
    pub fn gradient_step(
        &mut self,
        labeled: &[Sample],
        unlabeled: &[Sample],
    ) -> Result<LogRecord> {
        let cfg = &self.cfg;
        let state = &mut self.state;

        let idxs = state.labeled_sampler.next_batch(cfg.batch_labeled);
        let (images_l, labels_l) =
            assemble_batch(labeled, &idxs, true, cfg.augment, &mut state.aux_rng)?;
        let labels_l = labels_l.expect("labeled batch");
        let (breakdown_l, density_l, mut grads) =
            labeled_stream_grads(&state.student, &images_l, &labels_l, cfg)?;

        let mut breakdown_u = None;
        let mut density_u = None;
        let mut warning = None;
        if let Some(sampler) = state.unlabeled_sampler.as_mut() {
            let idxs = sampler.next_batch(cfg.batch_unlabeled);
            let (images_u, _) =
                assemble_batch(unlabeled, &idxs, false, cfg.augment, &mut state.aux_rng)?;

            let pseudo_source = state.frozen_teacher.as_ref().unwrap_or(&state.teacher);
            let (pseudo, teacher_probs) = generate_pseudo_labels(pseudo_source, &images_u)?;
            let entropy = entropy_map(&teacher_probs);
            let mask = region_mask(&entropy, cfg.q_unsup, cfg.percentile_scope)?;
            density_u = Some(mask.density());
            let splits = split_regions(&pseudo, &mask, cfg.net.num_classes)?;

            let (logits_u, trace_u) = state.student.forward_trace(&images_u)?;
            let probs_u = softmax(&logits_u);
            let weighting =
                stream_weighting(cfg.ablation.crl_on, cfg.ablation.region_strategy_unlabeled);
            let alpha_u = if cfg.ablation.remove_unreliable {
                0.0
            } else {
                cfg.alpha
            };
            let (bu, dlogits_u) =
                region_loss_with_logit_grad(&probs_u, &splits, alpha_u, weighting)?;
            let grads_u = state.student.backward(&trace_u, &dlogits_u);
            for (g, gu) in grads.values.iter_mut().zip(grads_u.values.iter()) {
                *g += gu;
            }
            breakdown_u = Some(bu);
        } else if !self.warned_no_unlabeled {
            warning = Some("unlabeled pool is empty; training supervised-only".to_string());
            self.warned_no_unlabeled = true;
        }

        sgd_step(
            &mut state.student,
            &grads,
            &mut state.momentum_buf,
            cfg.lr,
            cfg.momentum,
        );

        let loss_total = breakdown_l.total + breakdown_u.map_or(0.0, |b| b.total);
        Ok(LogRecord {
            step: state.step,
            phase: Phase::Semi,
            loss_total,
            labeled: breakdown_l,
            unlabeled: breakdown_u,
            mask_density_labeled: Some(density_l),
            mask_density_unlabeled: density_u,
            lambda: None,
            lr: cfg.lr,
            warning,
        })
    }

    /// The EMA half of one iteration; advances the step counter.
    pub fn apply_ema(&mut self) -> Result<f64> {
        let lambda = ema_update(
            &mut self.state.teacher,
            &self.state.student,
            self.state.step,
            self.cfg.ema_cap,
            self.cfg.ema_convention,
        )?;
        self.state.step += 1;
        Ok(lambda)
    }

    /// One full iteration: gradient step plus EMA update.
    pub fn step(&mut self, labeled: &[Sample], unlabeled: &[Sample]) -> Result<LogRecord> {
        let mut record = self.gradient_step(labeled, unlabeled)?;
        record.lambda = Some(self.apply_ema()?);
        Ok(record)
    }
}

/// Run the whole semi-supervised phase.
pub fn train_semi(
    labeled: &[Sample],
    unlabeled: &[Sample],
    teacher0: Network,
    cfg: &TrainConfig,
) -> Result<(TrainState, Vec<LogRecord>)> {
    let mut trainer = SemiTrainer::new(teacher0, cfg, labeled.len(), unlabeled.len())?;
    let mut logs = Vec::with_capacity(cfg.semi_iters);
    for _ in 0..cfg.semi_iters {
        logs.push(trainer.step(labeled, unlabeled)?);
    }
    Ok((trainer.into_state(), logs))
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

/// Everything produced by one complete run.
pub struct PipelineOutput {
    pub pretrained_teacher: Network,
    pub state: TrainState,
    pub pretrain_logs: Vec<LogRecord>,
    pub semi_logs: Vec<LogRecord>,
    pub manifest: crate::datasets::SplitManifest,
}

/// Split the training pool, pretrain the teacher on the labeled part, and run
/// the semi phase with labels hidden from the unlabeled part.
pub fn run_pipeline(train_pool: &[Sample], cfg: &TrainConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let ids = crate::datasets::ids_of(train_pool);
    let manifest =
        crate::datasets::split_labeled_unlabeled(&ids, cfg.labeled_ratio, cfg.seed)?;

    let by_id: std::collections::BTreeMap<&str, &Sample> =
        train_pool.iter().map(|s| (s.id.as_str(), s)).collect();
    let labeled: Vec<Sample> = manifest
        .labeled_ids
        .iter()
        .map(|id| (*by_id.get(id.as_str()).expect("manifest id from pool")).clone())
        .collect();
    if labeled.iter().any(|s| s.label.is_none()) {
        return Err(Error::Config(
            "a sample assigned to the labeled pool has no label".into(),
        ));
    }
    let unlabeled: Vec<Sample> = manifest
        .unlabeled_ids
        .iter()
        .map(|id| {
            let mut s = (*by_id.get(id.as_str()).expect("manifest id from pool")).clone();
            s.label = None; // hidden from training; originals keep ground truth
            s
        })
        .collect();

    let (teacher0, pretrain_logs) = pretrain_teacher(&labeled, cfg)?;
    let (state, semi_logs) = train_semi(&labeled, &unlabeled, teacher0.clone(), cfg)?;
    Ok(PipelineOutput {
        pretrained_teacher: teacher0,
        state,
        pretrain_logs,
        semi_logs,
        manifest,
    })
}
