//! SPMix: saliency-guided, patch-based mixup for long-tailed image
//! classification, with the full training and evaluation pipeline behind it.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff and checkpoints
//! - [`imaging`]: image I/O, resizing, and stochastic augmentation views
//! - [`saliency`]: static center-surround saliency and per-patch mixup ratios
//! - [`mixup`]: feature-level and image-level patch blending
//! - [`encoder`]: conv stem + transformer query/key pair with momentum update
//! - [`train`]: supervised contrastive loss, AdamW, balanced sampling, loop
//! - [`dataset`]: manifests, long-tailed splits, synthetic data generation
//! - [`eval`]: linear probing and Many/Medium/Few metrics
//! - [`experiment`]: end-to-end runs and the ablation grid

pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod imaging;
pub mod mixup;
pub mod saliency;
pub mod tensor;
pub mod train;

pub use error::{Result, SpmixError};
