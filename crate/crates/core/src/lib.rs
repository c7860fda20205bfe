//! Training-free, mask-guided anomaly synthesis on a small latent diffusion
//! model.
//!
//! The pieces:
//!
//! - [`numerics`]: `f32` tensors, the differentiable op set, seeded RNG.
//! - [`schedule`]: variance schedule, forward noising, reverse step.
//! - [`text`]: prompt templates and a seeded embedding-table text encoder.
//! - [`attention`]: masks, mask pyramids, attention and its CAE/SAE logit
//!   enhancement.
//! - [`denoiser`]: the ε-predictor, its training loop and checkpoints.
//! - [`codec`]: lossless space-to-depth pixel ↔ latent transform.
//! - [`pipeline`]: blended, enhanced sampling from a normal image and mask.

pub mod attention;
pub mod codec;
pub mod denoiser;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod schedule;
pub mod text;

pub use error::{Error, Result};
