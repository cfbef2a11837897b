pub mod checkpoint;
pub mod compose;
pub mod control;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod inpaint;
pub mod metrics;
pub mod nn;
pub mod refine;
pub mod scalar;
pub mod seed;
pub mod segment;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};

pub type Denoiser32 = diffusion::Denoiser<f32>;
pub type Denoiser64 = diffusion::Denoiser<f64>;
pub type ModelRegistry32 = inpaint::ModelRegistry<f32>;
pub type ModelRegistry64 = inpaint::ModelRegistry<f64>;
pub type ControlHandle32 = control::ControlHandle<f32>;
pub type ControlHandle64 = control::ControlHandle<f64>;
pub type Segmenter32 = segment::Segmenter<f32>;
pub type Segmenter64 = segment::Segmenter<f64>;
pub type ToyFeatureExtractor32 = metrics::ToyFeatureExtractor<f32>;
pub type ToyFeatureExtractor64 = metrics::ToyFeatureExtractor<f64>;
