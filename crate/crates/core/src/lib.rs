//! Masked image modeling with pluggable reconstruction targets.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`tensor`]: reverse-mode differentiable tensors and optimizers
//! * [`patch`]: patchification and random masking
//! * [`vit`]: a small Vision Transformer encoder with per-layer feature taps
//! * [`afr`]: aggregated multi-layer feature targets
//! * [`decoder`]: the single-block decoder with selectable token correlation
//! * [`trainer`]: pixel, single-layer and aggregated-feature pretraining
//! * [`fewshot`]: episodic prototype and fine-tune evaluation
//! * [`analysis`]: linear CKA and the domain-similarity probes
//! * [`data`]: synthetic two-domain data, PPM ingestion, checkpoints, config files
//! * [`modelcheck`]: finite-difference checks of whole-model gradients

pub mod afr;
pub mod analysis;
pub mod data;
pub mod decoder;
pub mod error;
pub mod exec;
pub mod fewshot;
pub mod modelcheck;
pub mod patch;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
