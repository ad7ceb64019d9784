//! Parser-free virtual try-on with latent diffusion: synthetic data, a
//! latent autoencoder, the diffusion process, a garment-conditioned U-Net,
//! training, sampling, and evaluation metrics.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod trainer;
pub mod unet;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use image::Image;
