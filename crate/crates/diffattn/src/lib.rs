//! Driver visual-attention prediction as multi-scale conditional diffusion.
//!
//! The library predicts where a driver looks in a traffic scene. A saliency
//! map is generated by iteratively denoising a Gaussian latent, conditioned on
//! multi-scale image features:
//!
//! - [`schedule`]: diffusion noise schedule, forward corruption, DDPM/DDIM steps.
//! - [`saliency`]: fixation maps and Gaussian-blurred ground-truth saliency.
//! - [`metrics`]: saliency evaluation metrics (KLD, CC, SIM, NSS, AUC-Judd).
//! - [`data`]: dataset layout, loading, augmentation, synthetic scene generator.
//! - [`encoder`]: four-level feature pyramid backbones.
//! - [`ffp`]: feature fusion pyramid with channel and cross-layer attention.
//! - [`enhance`]: sequence-model feature enhancement with a frozen middle layer.
//! - [`decoder`]: per-scale conditional noise predictors and coarse-to-fine sampling.
//! - [`loss`]: per-scale BCE / KL / noise-matching objective.
//! - [`model`]: full model assembly.
//! - [`train`] / [`optim`] / [`checkpoint`]: training loop, AdamW, persistence.
//! - [`config`] / [`commands`]: TOML experiment configs and CLI entry points.
//! - [`viz`]: PNG rendering of maps, overlays and denoising strips.
//!
//! Tensors use NCHW layout throughout. All randomness flows through
//! explicitly seeded ChaCha streams so that runs are reproducible bit-for-bit
//! on CPU.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod enhance;
pub mod error;
pub mod ffp;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod saliency;
pub mod schedule;
pub mod train;
pub mod util;
pub mod viz;

pub use error::{Error, Result};
