pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod extractor;
pub mod imageio;
pub mod metrics;
pub mod nn;
mod noise;
pub mod pipeline;
pub mod reconstruction;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{ImageTensor, Map2d};
