use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::layer::linear;
use crate::error::{Error, Result};
use crate::numerics::{AttentionMask, AttnShape, BatchMask, Graph, ParamStore, RngState, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub hidden: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(hidden: usize, heads: usize) -> Result<Self> {
        if hidden == 0 || heads == 0 || hidden % heads != 0 {
            return Err(Error::Config(format!(
                "hidden dim {hidden} must be a positive multiple of heads {heads}"
            )));
        }
        Ok(Self { hidden, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Projections `q, k, v, o`. Queries come from a `hidden`-wide stream, keys
/// and values from a `kv_dim`-wide one.
pub fn init_attention(
    store: &mut ParamStore,
    prefix: &str,
    cfg: AttentionConfig,
    kv_dim: usize,
    rng: &mut RngState,
) -> Result<()> {
    store.init_linear(&format!("{prefix}.q"), cfg.hidden, cfg.hidden, rng)?;
    store.init_linear(&format!("{prefix}.k"), kv_dim, cfg.hidden, rng)?;
    store.init_linear(&format!("{prefix}.v"), kv_dim, cfg.hidden, rng)?;
    store.init_linear(&format!("{prefix}.o"), cfg.hidden, cfg.hidden, rng)
}

/// Output of one attention sublayer. `weights` is the node whose recorded
/// attention probabilities can be read with
/// [`Graph::attention_weights`](crate::numerics::Graph::attention_weights).
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub out: Var,
    pub weights: Var,
}

/// Multi-head scaled dot-product attention with input/output projections.
///
/// No positional information is added to `kv_in`, so the result is invariant
/// to any permutation of the key/value rows (applied together with the mask
/// columns).
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    cfg: AttentionConfig,
    shape: AttnShape,
    mask: Option<Rc<BatchMask>>,
    lora_scale: Option<f64>,
) -> Result<Attended> {
    if shape.heads != cfg.heads {
        return Err(Error::Config(format!(
            "attention shape has {} heads, config {}",
            shape.heads, cfg.heads
        )));
    }
    let q = linear(g, store, &format!("{prefix}.q"), q_in, lora_scale)?;
    let k = linear(g, store, &format!("{prefix}.k"), kv_in, lora_scale)?;
    let v = linear(g, store, &format!("{prefix}.v"), kv_in, lora_scale)?;
    let weights = g.attention(q, k, v, shape, mask)?;
    let out = linear(g, store, &format!("{prefix}.o"), weights, lora_scale)?;
    Ok(Attended { out, weights })
}

/// Lower-triangular mask for autoregressive decoding.
pub fn causal_self_attention_mask(t: usize) -> Result<AttentionMask> {
    if t == 0 {
        return Err(Error::InvalidArgument("causal mask of length 0".into()));
    }
    Ok(AttentionMask::causal(t))
}
