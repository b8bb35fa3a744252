//! Decoder-only transformer with feed-forward key instrumentation.
//!
//! Each FF sublayer is treated as a key-value memory: row `i` of `ff_keys`
//! is a pattern detector over the FF input, row `i` of `ff_values` is what
//! gets written to the residual stream when that key fires.

mod config;
mod forward;
mod weights;

pub use config::{ModelConfig, Nonlinearity, NormPlacement, PositionEncoding, ResidualStyle};
pub use forward::{ff_apply, logits_from_hidden, ForwardTrace, Model};
pub use weights::{required_tensors, LayerWeights, TensorName, TensorRef, WeightSet};

/// Builds a validated model handle from a config and its weights.
pub fn build_model(config: ModelConfig, weights: WeightSet) -> crate::Result<Model> {
    Model::new(config, weights)
}
