//! Two-stage encoder inversion for a style-modulated radiance-field generator.
//!
//! A frozen generator maps latents to images through volume rendering; a
//! base encoder predicts a view-invariant latent in `W`, and a refining
//! encoder adds per-layer residuals in `W+`.

pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod field_core;
pub mod generator;
pub mod imageio;
pub mod inversion;
pub mod losses;
pub mod nn;
pub mod real;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use real::{Dtype, Real};
