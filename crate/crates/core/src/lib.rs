//! Distributional flow matching at desk scale.
//!
//! A velocity-field network predicts a Gaussian `N(mu, sigma^2 I)` over
//! velocities instead of a point estimate and is trained by negative
//! log-likelihood on linear-interpolation transport paths. The learned
//! variance drives temperature-controlled trajectory sampling and
//! inference-time best-of-N / per-step guided search against consistency
//! and prompt-adherence objectives, all on synthetic conditional mixture
//! datasets with known ground truth.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod sampler;
pub mod search;
pub mod train;

pub use error::{DfmError, Result};
