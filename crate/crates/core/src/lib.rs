//! Multi-hypothesis 3D pose lifting with a conditional denoising diffusion
//! model over 2D joint heatmaps.

pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod conditioning;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod hypotheses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pose;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tensor;

pub use binio::{read_file, write_atomic};
pub use error::{Error, Result};
