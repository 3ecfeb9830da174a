//! The hierarchical conditional VAE.

mod condition;
mod config;
mod noise;
mod snapshot;
mod vaex;


pub use condition::{argmax, recenter_vector, ConditionSource, ConditionVector, RECENTER_TIMES};
pub use config::{ModelConfig, Variant};
pub use noise::{NoiseSource, SeededNoise, ZeroNoise};
pub use snapshot::VaexSnapshot;
pub use vaex::{
    effective_posterior, intervene_top_latent, relaxation_factor, DecodeOptions, ForwardTrace, GraphTrace,
    LatentLayerState, LayerVars, Vaex, COUNTERFACTUAL_TEMPERATURE,
};
