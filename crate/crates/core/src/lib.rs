//! Training-free style transfer on a toy latent diffusion model: noise
//! schedule and DDIM, a small UNet backbone, LoRA adapters, feature and
//! attention injection, spatial/temporal composition and feature analysis.

pub mod analysis;
pub mod autograd;
pub mod backbone;
pub mod composition;
pub mod data;
pub mod error;
pub mod image;
pub mod injection;
pub mod lora;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod persist;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use image::ToyImage;
pub use schedule::{NoiseSchedule, SamplingPlan};
pub use tensor::{LatentShape, LatentTensor};
