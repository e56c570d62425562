//! Configurable decoder-only transformer with a gated FFN, optional top-2
//! mixture-of-experts layers and three residual layouts.
//!
//! Layers are numbered from 1 in every public API.

mod config;
mod forward;
mod params;

pub use config::{ModelConfig, MoeConfig, NormKind, Positional, ResidualVariant};
pub use forward::{
    build_forward, ffn_intermediate, forward, moe_route, AdapterVars, FfnIntermediate, FfnNodes, ForwardNodes,
    ForwardOptions, LayerNodes, Model, ParamVars,
};
pub use params::{names, param_schema, FfnWeights, ParamKind, ParamSpec, ParameterStore};
