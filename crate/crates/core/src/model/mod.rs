//! Multi-modal node embedding, Graphormer encoder and linear decoder heads.

mod batch;
mod config;
mod forward;
mod params;

pub use batch::{GraphStructure, NodeBatch};
pub use config::{fingerprint, DiscreteSlot, FeatureLayout, ModelConfig, Variant};
pub use forward::{assemble_node_embedding, Bound, Encoded, Model};
pub use params::{
    build_params, init_encoder, init_head, Head, ModelParams, DECODER_PREFIX, ENCODER_PREFIX,
};
