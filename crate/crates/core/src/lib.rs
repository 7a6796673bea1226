//! Variation-normalized autoencoding of frozen re-identification features.
//!
//! The crate trains a small VAE over feature vectors whose latent mean is
//! supervised by identity losses, optionally with a conditional "variation
//! distiller" one level above it and a Jensen-Shannon triplet loss between
//! the latent Gaussians. At inference only the encoder mean is used.

mod bytes;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod gaussian;
pub mod losses;
pub mod ndtensor;
pub mod nets;
pub mod trainkit;

pub use error::{Error, Result};
pub use ndtensor::{Graph, Precision, Rng, Scalar, Tensor, TensorError, Var};
