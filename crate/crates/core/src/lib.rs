//! VAEX: a hierarchical conditional VAE conditioned on classifier
//! probabilities, with r-relaxed counterfactual generation.

pub mod autograd;
pub mod checkpoint;
pub mod classifier;
pub mod counterfactual;
pub mod data;
pub mod error;
pub mod kv;
pub mod model;
pub mod nn;
pub mod probcache;
pub mod stochastic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ConditionVector, DecodeOptions, ModelConfig, Variant, Vaex, VaexSnapshot};
pub use stochastic::{DiagGaussian, PixelVarianceTracker};
pub use tensor::{Float, Tensor};
