//! Cascaded text-to-video generation at desk scale: a latent codec, a
//! reference-conditioned spatio-temporal diffusion denoiser, a latent
//! video-to-video refiner and a kernel-based frame interpolator.

pub mod codec;
pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod stages;
pub mod synthetic;
pub mod text;
pub mod trainer;
pub mod training;
pub mod unet;
pub mod vfi;

pub use error::{Error, Result};
