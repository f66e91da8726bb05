//! Semi-supervised image segmentation with bidirectional region weighting.
//!
//! The library trains a slim U-Net inside a teacher-student loop. Per-pixel
//! prediction entropy is thresholded at a batch percentile to split every
//! image into reliable (low-entropy) and unreliable (high-entropy) regions.
//! Labeled batches up-weight the unreliable region so that precise ground
//! truth corrects the pixels the model is unsure about; unlabeled batches
//! down-weight it so that noisy pseudo-labels cannot dominate training.
//!
//! Modules:
//! - [`datasets`]: synthetic multi-class data with controllable boundary
//!   ambiguity, on-disk container format, labeled/unlabeled split manifests.
//! - [`model`]: slim encoder-decoder backbone with hand-written backward
//!   passes, softmax, checkpoint files.
//! - [`uncertainty`]: entropy maps, percentile thresholds, region masks.
//! - [`region`]: region-split labels and the weighted hybrid CE+Dice losses.
//! - [`training`]: the two-phase loop (supervised pretraining, then
//!   semi-supervised training with EMA teacher updates) and full-state
//!   checkpointing.
//! - [`metrics`]: Dice/Jaccard/95HD/ASD and pseudo-label diagnostics.

pub mod datasets;
pub mod error;
pub mod metrics;
pub mod model;
pub mod region;
pub mod training;
pub mod uncertainty;
pub mod util;

pub use error::{Error, Result};
