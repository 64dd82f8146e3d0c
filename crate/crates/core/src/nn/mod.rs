//! Transformer building blocks over the autodiff [`Graph`](crate::numerics::Graph).
//!
//! Parameters live in a [`ParamStore`](crate::numerics::ParamStore) under a
//! caller-chosen prefix; these functions only read them.

mod attention;
mod layer;

pub use attention::{causal_self_attention_mask, init_attention, multi_head_attention, AttentionConfig, Attended};
pub use layer::{
    feed_forward, init_feed_forward, init_transformer_layer, linear, transformer_layer, CrossInput,
    LayerConfig, LayerOutput, LN_EPS,
};
pub use crate::numerics::{AttentionMask, AttnShape, BatchMask};
