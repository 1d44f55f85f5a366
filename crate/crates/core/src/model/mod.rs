//! The backbone transformer and its past-state interface.

mod backbone;
mod checkpoint;
mod config;
mod past;

pub use backbone::{
    layer_kv, run_blocks, BackboneVars, Backbone, BlockVars, ForwardOut,
};
pub(crate) use backbone::{add_positions, init_blocks, position_table, split_heads};
pub use checkpoint::{Checkpoint, FORMAT_VERSION, KIND_KEY, MAGIC};
pub use config::{ModelConfig, LN_EPS};
pub use past::{LayerKv, PastState};

#[cfg(test)]
mod tests;
