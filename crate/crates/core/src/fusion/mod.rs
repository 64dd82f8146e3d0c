//! Multi-encoder fusion: per-encoder projection, sequence-wise
//! concatenation, encoder dropout, and the querying resampler that turns any
//! kept subset of encoder features into a fixed-length soft prompt.

mod config;
mod count;
mod kv;
mod resampler;

pub use config::{compression_ratio, reference_config, CrossAttnCadence, DropoutMode, FusionConfig};
pub use count::{count_trainable_params, ParamRow, ParamTable};
pub use kv::{
    draw_encoder_keep, encoder_dropout, proj_name, project_and_concat, project_batch, ConcatenatedKV, KvBatch,
    KvLayout, Phase, Segment,
};
pub use resampler::{
    attribution, ensemble_forward, init_resampler, meq_forward, qformer_forward, resample, AttentionRecord, Bridge,
    BridgeOutput, ResamplerOutput,
};
