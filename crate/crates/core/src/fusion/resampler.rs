use serde::{Deserialize, Serialize};

use super::config::FusionConfig;
use super::kv::{project_batch, proj_name, ConcatenatedKV, KvBatch, KvLayout, Segment};
use crate::error::{Error, Result};
use crate::nn::{init_transformer_layer, linear, transformer_layer, CrossInput, LN_EPS};
use crate::numerics::{Graph, ParamStore, RngState, Tensor, Var};
use crate::synth::{FeatureBundle, VOCAB_SIZE};

const EMBED_STD: f64 = 0.02;

/// Create all parameters of one resampler under `prefix`, trainable.
pub fn init_resampler(store: &mut ParamStore, prefix: &str, cfg: &FusionConfig, rng: &mut RngState) -> Result<()> {
    cfg.validate()?;
    for (id, &d) in cfg.encoder_ids.iter().zip(&cfg.feat_dims) {
        store.init_linear(&proj_name(prefix, id), d, cfg.d_proj, rng)?;
    }
    let q = cfg.num_queries();
    store.insert(
        &format!("{prefix}.queries"),
        Tensor::new(vec![q, cfg.d_h], rng.normal_vec(q * cfg.d_h, EMBED_STD))?,
        true,
    )?;
    if cfg.text_input {
        store.insert(
            &format!("{prefix}.tok_emb"),
            Tensor::new(vec![VOCAB_SIZE, cfg.d_h], rng.normal_vec(VOCAB_SIZE * cfg.d_h, EMBED_STD))?,
            true,
        )?;
        store.insert(
            &format!("{prefix}.pos_emb"),
            Tensor::new(
                vec![cfg.max_text_len, cfg.d_h],
                rng.normal_vec(cfg.max_text_len * cfg.d_h, EMBED_STD),
            )?,
            true,
        )?;
    }
    for l in 0..cfg.layers {
        init_transformer_layer(store, &format!("{prefix}.layer{l}"), &cfg.layer_config(l)?, rng)?;
    }
    store.init_layer_norm(&format!("{prefix}.ln_out"), cfg.d_h)?;
    if cfg.fc_layers == 1 {
        store.init_linear(&format!("{prefix}.fc"), cfg.d_h, cfg.d_lm, rng)?;
    } else {
        store.init_linear(&format!("{prefix}.fc1"), cfg.d_h, cfg.d_h, rng)?;
        store.init_linear(&format!("{prefix}.fc2"), cfg.d_h, cfg.d_lm, rng)?;
    }
    Ok(())
}

/// Resampler result for a batch.
#[derive(Debug, Clone)]
pub struct ResamplerOutput {
    /// `[batch * Q, d_lm]`.
    pub prompt: Var,
    pub num_queries: usize,
    /// Cross-attention weights of every layer that has cross-attention.
    pub cross_weights: Vec<Var>,
    pub segments: Vec<Segment>,
    pub keep: Vec<Vec<bool>>,
    pub encoder_ids: Vec<String>,
}

fn text_len(cfg: &FusionConfig, text: Option<&[Vec<usize>]>, batch: usize) -> Result<usize> {
    let Some(text) = text.filter(|_| cfg.text_input) else {
        return Ok(0);
    };
    if text.len() != batch {
        return Err(Error::InvalidArgument(format!(
            "{} text prompts for a batch of {batch}",
            text.len()
        )));
    }
    let t = text[0].len();
    if text.iter().any(|s| s.len() != t) {
        return Err(Error::InvalidArgument("text prompts in a batch must share one length".into()));
    }
    if t > cfg.max_text_len {
        return Err(Error::SequenceTooLong {
            len: t,
            max: cfg.max_text_len,
        });
    }
    Ok(t)
}

/// Queries (and text, when enabled) attend to each other and cross-attend
/// to the projected features; the first Q rows are mapped to the LM width.
pub fn resample(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &FusionConfig,
    prefix: &str,
    kv: &KvBatch,
    text: Option<&[Vec<usize>]>,
) -> Result<ResamplerOutput> {
    let batch = kv.batch;
    let q = cfg.num_queries();
    let t = text_len(cfg, text, batch)?;
    let queries = g.param(store, &format!("{prefix}.queries"))?;
    let queries = g.tile(queries, batch)?;
    let mut x = queries;
    if t > 0 {
        let ids: Vec<usize> = text.unwrap().iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
        let tok = g.param(store, &format!("{prefix}.tok_emb"))?;
        let pos = g.param(store, &format!("{prefix}.pos_emb"))?;
        let te = g.embedding(tok, &ids)?;
        let pe = g.embedding(pos, &positions)?;
        let emb = g.add(te, pe)?;
        x = g.concat_blocks(&[queries, emb], &[q, t], batch)?;
    }
    let tq = q + t;
    let row_gate = (!cfg.text_cross_attends && t > 0).then(|| {
        (0..batch)
            .flat_map(|_| (0..tq).map(|i| if i < q { 1.0 } else { 0.0 }))
            .collect()
    });
    let cross = CrossInput {
        kv: kv.kv,
        tk: kv.tk,
        mask: kv.mask(tq),
        row_gate,
    };
    let mut cross_weights = Vec::new();
    for l in 0..cfg.layers {
        let lc = cfg.layer_config(l)?;
        let c = cfg.has_cross(l).then_some(&cross);
        let out = transformer_layer(g, store, &format!("{prefix}.layer{l}"), x, &lc, batch, tq, None, c, None)?;
        x = out.x;
        if let Some(a) = out.cross_attn {
            cross_weights.push(a.weights);
        }
    }
    if t > 0 {
        x = g.slice_blocks(x, tq, 0, q, batch)?;
    }
    let gamma = g.param(store, &format!("{prefix}.ln_out.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.ln_out.beta"))?;
    let h = g.layer_norm(x, gamma, beta, LN_EPS)?;
    let prompt = if cfg.fc_layers == 1 {
        linear(g, store, &format!("{prefix}.fc"), h, None)?
    } else {
        let h = linear(g, store, &format!("{prefix}.fc1"), h, None)?;
        let h = g.gelu(h)?;
        linear(g, store, &format!("{prefix}.fc2"), h, None)?
    };
    debug_assert_eq!(g.value(prompt).shape(), &[batch * q, cfg.d_lm]);
    Ok(ResamplerOutput {
        prompt,
        num_queries: q,
        cross_weights,
        segments: kv.segments.clone(),
        keep: kv.keep.clone(),
        encoder_ids: cfg.encoder_ids.clone(),
    })
}

/// Per-encoder share of cross-attention mass from the learnable query rows,
/// averaged over layers, heads, query rows and batch, in config order.
/// Encoders absent from the KV (compact layout) get 0.
pub fn attribution(g: &Graph, out: &ResamplerOutput) -> Result<Vec<f64>> {
    let k = out.encoder_ids.len();
    let mut mass = vec![0.0; k];
    let seg_index: Vec<usize> = out
        .segments
        .iter()
        .map(|s| out.encoder_ids.iter().position(|e| *e == s.id).expect("segment of configured encoder"))
        .collect();
    let mut rows = 0usize;
    for &w in &out.cross_weights {
        let (data, shape) = g
            .attention_weights(w)
            .ok_or_else(|| Error::InvalidArgument("not an attention node".into()))?;
        for b in 0..shape.batch {
            for h in 0..shape.heads {
                for i in 0..out.num_queries {
                    let row = &data[((b * shape.heads + h) * shape.tq + i) * shape.tk..][..shape.tk];
                    for (s, &e) in out.segments.iter().zip(&seg_index) {
                        mass[e] += row[s.rows.clone()].iter().sum::<f64>();
                    }
                    rows += 1;
                }
            }
        }
    }
    if rows == 0 {
        return Err(Error::InvalidArgument("no cross-attention records".into()));
    }
    let total: f64 = mass.iter().sum();
    Ok(mass.iter().map(|m| m / total).collect())
}

/// One layer/head/query attention record of a single-sample forward:
/// `weights[layer][(h * tq + i) * tk + j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub heads: usize,
    pub tq: usize,
    pub tk: usize,
    pub weights: Vec<Vec<f64>>,
    pub segments: Vec<Segment>,
}

fn kv_batch_from(g: &mut Graph, cfg: &FusionConfig, kv: &ConcatenatedKV) -> Result<KvBatch> {
    if kv.matrix.cols() != cfg.d_proj {
        return Err(Error::Config(format!(
            "kv width {} but d_proj is {}",
            kv.matrix.cols(),
            cfg.d_proj
        )));
    }
    let mut next = 0;
    for s in &kv.segments {
        cfg.encoder_index(&s.id)?;
        if s.rows.start != next {
            return Err(Error::Config("segments must partition the kv rows".into()));
        }
        next = s.rows.end;
    }
    if next != kv.matrix.rows() {
        return Err(Error::Config("segments must partition the kv rows".into()));
    }
    let keep = cfg
        .encoder_ids
        .iter()
        .map(|id| kv.segments.iter().any(|s| &s.id == id))
        .collect();
    Ok(KvBatch {
        kv: g.constant(kv.matrix.clone()),
        tk: kv.matrix.rows(),
        batch: 1,
        key_keep: None,
        segments: kv.segments.clone(),
        keep: vec![keep],
    })
}

/// Soft prompt `[Q, d_lm]` of one sample from already projected features.
pub fn meq_forward(
    store: &ParamStore,
    cfg: &FusionConfig,
    prefix: &str,
    kv: &ConcatenatedKV,
    text_ids: &[usize],
) -> Result<(Tensor, AttentionRecord)> {
    let mut g = Graph::new();
    let kvb = kv_batch_from(&mut g, cfg, kv)?;
    let text = vec![text_ids.to_vec()];
    let text = (!text_ids.is_empty()).then_some(text.as_slice());
    let out = resample(&mut g, store, cfg, prefix, &kvb, text)?;
    let mut record = AttentionRecord {
        heads: cfg.heads,
        tq: 0,
        tk: kvb.tk,
        weights: Vec::new(),
        segments: kv.segments.clone(),
    };
    for &w in &out.cross_weights {
        let (data, shape) = g.attention_weights(w).expect("attention node");
        record.tq = shape.tq;
        record.weights.push(data.to_vec());
    }
    Ok((g.value(out.prompt).clone(), record))
}

/// Single-encoder specialization of [`meq_forward`].
pub fn qformer_forward(
    store: &ParamStore,
    cfg: &FusionConfig,
    prefix: &str,
    kv: &ConcatenatedKV,
    text_ids: &[usize],
) -> Result<Tensor> {
    if cfg.k() != 1 {
        return Err(Error::Config(format!("a Q-Former takes one encoder, config has {}", cfg.k())));
    }
    Ok(meq_forward(store, cfg, prefix, kv, text_ids)?.0)
}

/// Independent single-encoder resamplers whose prompts are stacked row-wise.
pub fn ensemble_forward(
    store: &ParamStore,
    members: &[(String, FusionConfig)],
    kvs: &[ConcatenatedKV],
    text_ids: &[usize],
) -> Result<Tensor> {
    if members.len() != kvs.len() || members.is_empty() {
        return Err(Error::Config("one kv per ensemble member required".into()));
    }
    let prompts = members
        .iter()
        .zip(kvs)
        .map(|((prefix, cfg), kv)| qformer_forward(store, cfg, prefix, kv, text_ids))
        .collect::<Result<Vec<_>>>()?;
    Tensor::vstack(&prompts.iter().collect::<Vec<_>>())
}

/// The bridge between encoder features and the LM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Bridge {
    /// One resampler over the concatenated features of all its encoders
    /// (a single-encoder Q-Former when it has one encoder).
    Meq { prefix: String, cfg: FusionConfig },
    /// One single-encoder resampler per encoder; no encoder dropout.
    Ensemble { members: Vec<(String, FusionConfig)> },
}

#[derive(Debug, Clone)]
pub struct BridgeOutput {
    pub prompt: Var,
    pub num_queries: usize,
    /// Present for the multi-encoder resampler only.
    pub resampler: Option<ResamplerOutput>,
}

impl Bridge {
    pub fn meq(cfg: FusionConfig) -> Self {
        Bridge::Meq {
            prefix: "meq".into(),
            cfg,
        }
    }

    pub fn single(template: &FusionConfig, id: &str) -> Result<Self> {
        Ok(Bridge::Meq {
            prefix: format!("qf.{id}"),
            cfg: template.single(id)?,
        })
    }

    pub fn ensemble(template: &FusionConfig) -> Result<Self> {
        let members = template
            .encoder_ids
            .iter()
            .map(|id| Ok((format!("ens.{id}"), template.single(id)?)))
            .collect::<Result<_>>()?;
        Ok(Bridge::Ensemble { members })
    }

    pub fn num_queries(&self) -> usize {
        match self {
            Bridge::Meq { cfg, .. } => cfg.num_queries(),
            Bridge::Ensemble { members } => members.iter().map(|(_, c)| c.num_queries()).sum(),
        }
    }

    pub fn d_lm(&self) -> usize {
        match self {
            Bridge::Meq { cfg, .. } => cfg.d_lm,
            Bridge::Ensemble { members } => members[0].1.d_lm,
        }
    }

    /// Parameter-name prefixes owned by this bridge.
    pub fn prefixes(&self) -> Vec<String> {
        match self {
            Bridge::Meq { prefix, .. } => vec![prefix.clone()],
            Bridge::Ensemble { members } => members.iter().map(|(p, _)| p.clone()).collect(),
        }
    }

    pub fn dropout(&self) -> Option<(f64, super::config::DropoutMode)> {
        match self {
            Bridge::Meq { cfg, .. } => Some((cfg.dropout_p, cfg.dropout_mode)),
            Bridge::Ensemble { .. } => None,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) -> Result<()> {
        match self {
            Bridge::Meq { prefix, cfg } => init_resampler(store, prefix, cfg, rng),
            Bridge::Ensemble { members } => {
                for (k, (prefix, cfg)) in members.iter().enumerate() {
                    init_resampler(store, prefix, cfg, &mut rng.derive(k as u64))?;
                }
                Ok(())
            }
        }
    }

    pub fn expected_param_count(&self) -> usize {
        match self {
            Bridge::Meq { cfg, .. } => cfg.expected_param_count(),
            Bridge::Ensemble { members } => members.iter().map(|(_, c)| c.expected_param_count()).sum(),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bundles: &[FeatureBundle],
        text: Option<&[Vec<usize>]>,
        layout: KvLayout,
    ) -> Result<BridgeOutput> {
        match self {
            Bridge::Meq { prefix, cfg } => {
                let kv = project_batch(g, store, cfg, prefix, bundles, layout)?;
                let out = resample(g, store, cfg, prefix, &kv, text)?;
                Ok(BridgeOutput {
                    prompt: out.prompt,
                    num_queries: out.num_queries,
                    resampler: Some(out),
                })
            }
            Bridge::Ensemble { members } => {
                let mut prompts = Vec::with_capacity(members.len());
                let mut rows = Vec::with_capacity(members.len());
                for (prefix, cfg) in members {
                    let kv = project_batch(g, store, cfg, prefix, bundles, layout)?;
                    let out = resample(g, store, cfg, prefix, &kv, text)?;
                    prompts.push(out.prompt);
                    rows.push(out.num_queries);
                }
                let prompt = g.concat_blocks(&prompts, &rows, bundles.len())?;
                Ok(BridgeOutput {
                    prompt,
                    num_queries: rows.iter().sum(),
                    resampler: None,
                })
            }
        }
    }
}
