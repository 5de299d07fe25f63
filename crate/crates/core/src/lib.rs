//! Latent-space confidence scoring for feed-forward classifiers.
//!
//! A trained network's hidden activations on correctly classified training
//! points are modelled per (layer, class) as Gaussians. New predictions are
//! scored by how typical their latents are under those Gaussians, mapped
//! through percentile-calibrated smoothsteps and multiplied across layers.
//! MC-dropout and deep-ensemble vote fractions are provided for comparison,
//! together with the leave-one-label-out evaluation harness.

pub mod baselines;
pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod latent_uq;
pub mod linalg;
pub mod nn;

pub use error::{Error, Result};
