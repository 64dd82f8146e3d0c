use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::attention::{init_attention, multi_head_attention, AttentionConfig, Attended};
use crate::error::Result;
use crate::numerics::{AttnShape, BatchMask, Graph, ParamStore, RngState, Var};

pub const LN_EPS: f64 = 1e-5;

/// `x·W + b`, plus `scale·(x·down)·up` when the store holds a low-rank
/// adapter for this projection and `lora_scale` is given.
pub fn linear(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    lora_scale: Option<f64>,
) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let mut y = g.matmul(x, w)?;
    let down = format!("{prefix}.lora_down");
    if let (Some(s), true) = (lora_scale, store.contains(&down)) {
        let d = g.param(store, &down)?;
        let u = g.param(store, &format!("{prefix}.lora_up"))?;
        let low = g.matmul(x, d)?;
        let low = g.matmul(low, u)?;
        let low = g.scale(low, s)?;
        y = g.add(y, low)?;
    }
    let b = g.param(store, &format!("{prefix}.b"))?;
    g.add_row(y, b)
}

fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

pub fn init_feed_forward(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    hidden: usize,
    rng: &mut RngState,
) -> Result<()> {
    store.init_linear(&format!("{prefix}.fc1"), d, hidden, rng)?;
    store.init_linear(&format!("{prefix}.fc2"), hidden, d, rng)
}

pub fn feed_forward(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, lora_scale: Option<f64>) -> Result<Var> {
    let h = linear(g, store, &format!("{prefix}.fc1"), x, lora_scale)?;
    let h = g.gelu(h)?;
    linear(g, store, &format!("{prefix}.fc2"), h, lora_scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub attn: AttentionConfig,
    pub ffn_hidden: usize,
    /// Width of the cross-attention key/value stream; `None` means the layer
    /// has no cross-attention sublayer.
    pub kv_dim: Option<usize>,
}

pub fn init_transformer_layer(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &LayerConfig,
    rng: &mut RngState,
) -> Result<()> {
    let d = cfg.attn.hidden;
    store.init_layer_norm(&format!("{prefix}.ln_self"), d)?;
    init_attention(store, &format!("{prefix}.self_attn"), cfg.attn, d, rng)?;
    if let Some(kv) = cfg.kv_dim {
        store.init_layer_norm(&format!("{prefix}.ln_cross"), d)?;
        init_attention(store, &format!("{prefix}.cross_attn"), cfg.attn, kv, rng)?;
    }
    store.init_layer_norm(&format!("{prefix}.ln_ffn"), d)?;
    init_feed_forward(store, &format!("{prefix}.ffn"), d, cfg.ffn_hidden, rng)
}

/// Key/value stream for a cross-attention sublayer.
#[derive(Debug, Clone)]
pub struct CrossInput {
    pub kv: Var,
    pub tk: usize,
    pub mask: Option<Rc<BatchMask>>,
    /// Per-row multiplier on the cross-attention update (0 disables it for
    /// that query row). `None` applies it everywhere.
    pub row_gate: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub x: Var,
    pub self_attn: Attended,
    pub cross_attn: Option<Attended>,
}

/// Pre-norm residual block: self-attention, optional cross-attention, FFN.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    cfg: &LayerConfig,
    batch: usize,
    tq: usize,
    self_mask: Option<Rc<BatchMask>>,
    cross: Option<&CrossInput>,
    lora_scale: Option<f64>,
) -> Result<LayerOutput> {
    let heads = cfg.attn.heads;
    let h = layer_norm(g, store, &format!("{prefix}.ln_self"), x)?;
    let shape = AttnShape {
        batch,
        tq,
        tk: tq,
        heads,
    };
    let self_attn = multi_head_attention(
        g,
        store,
        &format!("{prefix}.self_attn"),
        h,
        h,
        cfg.attn,
        shape,
        self_mask,
        lora_scale,
    )?;
    let mut x = g.add(x, self_attn.out)?;

    let mut cross_attn = None;
    if let Some(c) = cross {
        let h = layer_norm(g, store, &format!("{prefix}.ln_cross"), x)?;
        let shape = AttnShape {
            batch,
            tq,
            tk: c.tk,
            heads,
        };
        let att = multi_head_attention(
            g,
            store,
            &format!("{prefix}.cross_attn"),
            h,
            c.kv,
            cfg.attn,
            shape,
            c.mask.clone(),
            lora_scale,
        )?;
        let update = match &c.row_gate {
            Some(gate) => g.row_scale(att.out, gate)?,
            None => att.out,
        };
        x = g.add(x, update)?;
        cross_attn = Some(att);
    }

    let h = layer_norm(g, store, &format!("{prefix}.ln_ffn"), x)?;
    let f = feed_forward(g, store, &format!("{prefix}.ffn"), h, lora_scale)?;
    let x = g.add(x, f)?;
    Ok(LayerOutput {
        x,
        self_attn,
        cross_attn,
    })
}
