//! Synthetic aerial-to-ground view synthesis: procedural cities, drone and
//! street captures, point-cloud conditioning, a multi-view latent denoiser and
//! Gaussian-splat reconstruction with generated ground-view priors.

pub mod checkpoint;
pub mod city;
pub mod cloud;
pub mod condition;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod fsio;
pub mod geom;
pub mod imaging;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod splat;
pub mod trajectory;

pub use error::{Error, Result};
