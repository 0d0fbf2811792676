//! Large-kernel UNet for multimodal image fusion.
//!
//! The crate bundles everything needed to train, run and evaluate a fusion
//! network that merges two aligned source images (infrared + visible, or
//! MRI + CT/PET/SPECT) into one: the network itself, the composite training
//! loss, the six-metric evaluation suite, a paired-image data pipeline,
//! a deterministic training loop with checkpointing, and analysis tools
//! (histograms, feature-map consistency, inference timing).
//!
//! Entry points:
//! - [`model::FusionNet`], the network; [`model::ModelConfig`] describes a
//!   variant (normalization placement, kernel schedule, fusion module).
//! - [`losses`], the structure/intensity/gradient objective.
//! - [`metrics`]: SD, AG, SF, SCD, VIFF, SSIM on the 0-255 scale.
//! - [`data`]: image IO, YCbCr handling, patch sampling, inference padding.
//! - [`train`]: Adam loop, checkpoints, ablation matrix.
//! - [`analysis`]: histogram stats, local consistency maps, timing.

pub mod analysis;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
