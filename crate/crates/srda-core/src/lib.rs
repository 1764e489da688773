//! Source-relaxed domain adaptation for image segmentation.
//!
//! Adapts a source-pretrained segmentation model to an unlabeled target
//! domain using only the pretrained weights and a class-ratio prior: the
//! adaptation objective is prediction entropy plus a KL divergence that
//! matches the predicted region proportions to the prior. No source image
//! or source label is touched during adaptation.
//!
//! The crate ships the loss functions, a compact encoder-decoder
//! segmentation network, an auxiliary ratio regressor, a synthetic
//! cross-modality phantom benchmark, Dice/Hausdorff evaluation, the four
//! training regimes (source-only, source-free adaptation, the
//! source-coupled benchmark objective, and a fully supervised oracle), and
//! the `srda` command-line pipeline.

pub mod ckpt;
pub mod data_synth;
pub mod error;
pub mod fsprobe;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod npy;
pub mod ratio_prior;
pub mod report;
pub mod trainer;
pub mod types;

pub use error::{Result, SrdaError};
pub use types::{ClassRatio, LabelMask, LossValue, ProbMap};
