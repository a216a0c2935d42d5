//! Conditional normalizing flow for low-light image enhancement.
//!
//! An encoder maps the low-light image to an illumination-invariant color
//! map and per-level features; an invertible network conditioned on those
//! features maps normally exposed images to a Gaussian latent centred on
//! the color map. Training minimizes the exact negative log-likelihood;
//! enhancement inverts the network from the latent mean.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod inference;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod params;
pub mod preprocess;
pub mod selftest;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
