//! A desk-scale diffusion laboratory for studying the gap between the
//! noisy images a denoiser sees during training and the pure-noise starts it
//! sees at inference, and two remedies: starting inference from a noised
//! sample of a per-class PCA model (PCA-K offset inference) and training the
//! first skip window from the same starts (PCA-K offset training).

pub mod adam;
pub mod cli;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gap;
pub mod kvconfig;
pub mod pca;
pub mod pipeline;
pub mod ppm;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod tensorio;
pub mod trainer;

pub use error::{Error, Result};
