//! # jasrnet
//!
//! A training and evaluation toolkit for JASRNet, a multi-task network that
//! jointly super-resolves 16×16 face crops 8× and localizes facial landmarks
//! through heatmap regression.
//!
//! The crate is self-contained: it ships its own tensor type, reverse-mode
//! autodiff tape, convolution/pooling/pixel-shuffle kernels, the full data
//! pipeline (pts annotations, bicubic resampling, augmentation, heatmap
//! targets), the joint L1 + heatmap-MSE objective, PSNR-Y/SSIM/NME metrics,
//! and an ADAM trainer with checkpointing and an ablation grid.
//!
//! Structure:
//! - [`tensor`], [`exec`] — dense CHW tensors and the parallel execution switch
//! - [`graph`] — autodiff tape over the conv/pool/shuffle kernels
//! - [`model`] — the network itself (encoder, fusion, SR head, alignment head)
//! - [`data`] — dataset ingestion, resampling, augmentation, heatmap targets
//! - [`loss`], [`metrics`] — joint objective and evaluation metrics
//! - [`train`] — optimizer, schedule, evaluation passes, ablation grid
//! - [`checkpoint`] — versioned parameter container
//!
//! With the default `parallel` feature, batch work and the inner conv loops
//! run on rayon; disabling the feature falls back to sequential execution
//! with bit-identical results.

pub mod checkpoint;
pub mod data;
mod error;
pub mod exec;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{FeaturePyramid, FusionMode, Heads, ModelConfig, ModelOutput, Net, Variant};
pub use tensor::Tensor;
