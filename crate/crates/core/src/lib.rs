//! Patch-based crowd density forecasting.
//!
//! Annotations are rasterized into density maps, a fully convolutional patch
//! autoencoder compresses each 80×80 map into a 10×10 grid of latent vectors,
//! and a temporal convolution/deconvolution network applied independently at
//! every grid cell forecasts 12 future latent frames from 8 past ones.
//! Forecasts are scored with KL, inverse-KL and Jensen–Shannon divergences
//! between normalized, Gaussian-smoothed maps.

pub mod annotations;
pub mod baselines;
pub mod cli;
pub mod density;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
