//! A small decoder-only language model that reads `[soft prompt ; text]`,
//! with low-rank adapters on its attention projections.

mod pretrain;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_transformer_layer, linear, transformer_layer, AttentionConfig, LayerConfig, LN_EPS};
use crate::numerics::{AttentionMask, BatchMask, Graph, ParamStore, RngState, Tensor, Var};
use crate::synth::{Token, Vocabulary, VOCAB_SIZE};

pub use pretrain::{context_bag, pretrain_text_lm, TextPretrainSpec};

pub const LM_PREFIX: &str = "lm";
const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeTier {
    Small,
    Base,
}

/// Default `alpha / rank`. Adapter updates scale with it; at 1 the adapters
/// barely move within the short fine-tuning budgets used here.
pub const LORA_ALPHA_RATIO: f64 = 8.0;

/// Projection names accepted as LoRA targets.
pub const LORA_TARGETS: [&str; 6] = ["q", "k", "v", "o", "fc1", "fc2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Projections to adapt in every layer: self-attention `q`, `k`, `v`,
    /// `o` and feed-forward `fc1`, `fc2`.
    pub targets: Vec<String>,
}

impl LoraConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            alpha: LORA_ALPHA_RATIO * rank as f64,
            targets: ["q", "k", "v", "o"].map(String::from).to_vec(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LMConfig {
    pub vocab: usize,
    pub d_lm: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub tier: SizeTier,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
}

impl LMConfig {
    pub fn tier(tier: SizeTier) -> Self {
        let (d_lm, layers, heads, ffn_hidden) = match tier {
            SizeTier::Small => (32, 1, 2, 64),
            SizeTier::Base => (64, 2, 4, 128),
        };
        Self {
            vocab: VOCAB_SIZE,
            d_lm,
            layers,
            heads,
            ffn_hidden,
            max_seq_len: 48,
            tier,
            lora: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab != VOCAB_SIZE {
            return Err(Error::Config(format!("vocab must be {VOCAB_SIZE}, got {}", self.vocab)));
        }
        if self.layers == 0 || self.ffn_hidden == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("LM dimensions must be positive".into()));
        }
        AttentionConfig::new(self.d_lm, self.heads)?;
        Ok(())
    }

    fn layer_config(&self) -> Result<LayerConfig> {
        Ok(LayerConfig {
            attn: AttentionConfig::new(self.d_lm, self.heads)?,
            ffn_hidden: self.ffn_hidden,
            kv_dim: None,
        })
    }

    fn lora_scale(&self) -> Option<f64> {
        self.lora.as_ref().map(LoraConfig::scale)
    }
}

fn name(s: &str) -> String {
    format!("{LM_PREFIX}.{s}")
}

/// Create LM parameters, trainable until [`freeze`] is called.
pub fn init_lm(store: &mut ParamStore, cfg: &LMConfig, rng: &mut RngState) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_lm;
    store.insert(
        &name("tok_emb"),
        Tensor::new(vec![cfg.vocab, d], rng.normal_vec(cfg.vocab * d, EMBED_STD))?,
        true,
    )?;
    store.insert(
        &name("pos_emb"),
        Tensor::new(vec![cfg.max_seq_len, d], rng.normal_vec(cfg.max_seq_len * d, EMBED_STD))?,
        true,
    )?;
    let lc = cfg.layer_config()?;
    for l in 0..cfg.layers {
        init_transformer_layer(store, &name(&format!("layer{l}")), &lc, rng)?;
    }
    store.init_layer_norm(&name("ln_f"), d)?;
    // Small output weights keep untrained logits near uniform.
    store.insert(
        &name("head.w"),
        Tensor::new(vec![d, cfg.vocab], rng.normal_vec(d * cfg.vocab, EMBED_STD))?,
        true,
    )?;
    store.insert(&name("head.b"), Tensor::zeros(&[cfg.vocab]), true)
}

fn is_lora(n: &str) -> bool {
    n.contains(".lora_")
}

/// Mark every base LM tensor frozen. Adapters keep their flags.
pub fn freeze(store: &mut ParamStore) {
    set_base(store, false);
}

pub fn unfreeze(store: &mut ParamStore) {
    set_base(store, true);
}

fn set_base(store: &mut ParamStore, trainable: bool) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(&format!("{LM_PREFIX}.")) && !is_lora(n))
        .map(String::from)
        .collect();
    for n in names {
        store.set_trainable(&n, trainable).expect("listed name");
    }
}

/// Add rank-`r` adapters to the configured attention projections of every
/// layer, freeze the base LM and record the adapter in `cfg`. The up-map
/// starts at zero so the adapted model equals the base model exactly.
/// Returns the number of adapter parameters added.
pub fn lora_wrap(store: &mut ParamStore, cfg: &mut LMConfig, lora: LoraConfig, rng: &mut RngState) -> Result<usize> {
    if cfg.lora.is_some() {
        return Err(Error::Config("LM already has adapters".into()));
    }
    let d = cfg.d_lm;
    if lora.rank == 0 || lora.rank > d {
        return Err(Error::Config(format!(
            "LoRA rank {} must be in 1..={d} (min of projection in/out dims)",
            lora.rank
        )));
    }
    if lora.targets.is_empty() || lora.targets.iter().any(|t| !LORA_TARGETS.contains(&t.as_str())) {
        return Err(Error::Config(format!("LoRA targets must be among {LORA_TARGETS:?}: {:?}", lora.targets)));
    }
    let mut added = 0;
    for l in 0..cfg.layers {
        for t in &lora.targets {
            let (p, din, dout) = match t.as_str() {
                "fc1" => (name(&format!("layer{l}.ffn.fc1")), d, cfg.ffn_hidden),
                "fc2" => (name(&format!("layer{l}.ffn.fc2")), cfg.ffn_hidden, d),
                _ => (name(&format!("layer{l}.self_attn.{t}")), d, d),
            };
            let down = rng.normal_vec(din * lora.rank, 1.0 / (din as f64).sqrt());
            store.insert(&format!("{p}.lora_down"), Tensor::new(vec![din, lora.rank], down)?, true)?;
            store.insert(&format!("{p}.lora_up"), Tensor::zeros(&[lora.rank, dout]), true)?;
            added += lora.rank * (din + dout);
        }
    }
    freeze(store);
    cfg.lora = Some(lora);
    Ok(added)
}

/// Soft prompt rows for a batch: `[batch * rows, d_lm]`.
#[derive(Debug, Clone, Copy)]
pub struct SoftInput {
    pub prompt: Var,
    pub rows: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LmOutput {
    /// `[batch * targets, V]`, one row per predicted target token.
    pub logits: Var,
    pub loss: Var,
}

/// Final hidden rows `[batch * n, d]` predicting the `n` tokens that follow
/// sequence position `first - 1`, given `[soft ; tokens]` per sample.
fn run(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &LMConfig,
    soft: Option<SoftInput>,
    tokens: &[Vec<usize>],
    first: usize,
    n: usize,
) -> Result<Var> {
    let batch = tokens.len();
    let t = tokens[0].len();
    if tokens.iter().any(|s| s.len() != t) {
        return Err(Error::InvalidArgument("token sequences in a batch must share one length".into()));
    }
    let q = soft.map_or(0, |s| s.rows);
    let len = q + t;
    if len > cfg.max_seq_len || t > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len,
            max: cfg.max_seq_len,
        });
    }
    let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
    let tok = g.param(store, &name("tok_emb"))?;
    let pos = g.param(store, &name("pos_emb"))?;
    let te = g.embedding(tok, &ids)?;
    let pe = g.embedding(pos, &positions)?;
    let mut x = g.add(te, pe)?;
    if let Some(s) = soft {
        if g.value(s.prompt).shape() != [batch * q, cfg.d_lm] {
            return Err(Error::Dimension {
                op: "lm soft prompt",
                lhs: vec![batch * q, cfg.d_lm],
                rhs: g.value(s.prompt).shape().to_vec(),
            });
        }
        x = g.concat_blocks(&[s.prompt, x], &[q, t], batch)?;
    }
    let mask = Rc::new(BatchMask::shared(AttentionMask::causal(len)));
    let lc = cfg.layer_config()?;
    for l in 0..cfg.layers {
        x = transformer_layer(
            g,
            store,
            &name(&format!("layer{l}")),
            x,
            &lc,
            batch,
            len,
            Some(mask.clone()),
            None,
            cfg.lora_scale(),
        )?
        .x;
    }
    let h = g.slice_blocks(x, len, first, n, batch)?;
    let gamma = g.param(store, &name("ln_f.gamma"))?;
    let beta = g.param(store, &name("ln_f.beta"))?;
    let h = g.layer_norm(h, gamma, beta, LN_EPS)?;
    linear(g, store, &name("head"), h, None)
}

/// Teacher-forced forward. Each sample reads `[soft ; prompt ; targets[..n-1]]`
/// and the loss is the mean cross-entropy of the `n` targets.
pub fn lm_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &LMConfig,
    soft: Option<SoftInput>,
    prompt_ids: &[Vec<usize>],
    target_ids: &[Vec<usize>],
) -> Result<LmOutput> {
    if prompt_ids.is_empty() || prompt_ids.len() != target_ids.len() {
        return Err(Error::InvalidArgument("prompt and target batches differ".into()));
    }
    let n = target_ids[0].len();
    if n == 0 {
        return Err(Error::EmptyLoss);
    }
    if target_ids.iter().any(|t| t.len() != n) {
        return Err(Error::InvalidArgument("target sequences in a batch must share one length".into()));
    }
    let p = prompt_ids[0].len();
    if p == 0 {
        return Err(Error::InvalidArgument("prompt must hold at least one token".into()));
    }
    let tokens: Vec<Vec<usize>> = prompt_ids
        .iter()
        .zip(target_ids)
        .map(|(pr, tg)| pr.iter().chain(&tg[..n - 1]).copied().collect())
        .collect();
    let q = soft.map_or(0, |s| s.rows);
    let logits = run(g, store, cfg, soft, &tokens, q + p - 1, n)?;
    let flat: Vec<usize> = target_ids.iter().flatten().copied().collect();
    let loss = g.cross_entropy(logits, &flat, &vec![true; flat.len()])?;
    Ok(LmOutput { logits, loss })
}

/// Logits `[batch, V]` for the token after each full sequence.
pub fn next_token_logits(
    store: &ParamStore,
    cfg: &LMConfig,
    soft: Option<(&Tensor, usize)>,
    tokens: &[Vec<usize>],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let soft = soft.map(|(t, rows)| SoftInput {
        prompt: g.constant(t.clone()),
        rows,
    });
    let q = soft.map_or(0, |s| s.rows);
    let t = tokens.first().map_or(0, Vec::len);
    if t == 0 {
        return Err(Error::InvalidArgument("decoding needs a non-empty prompt".into()));
    }
    let out = run(&mut g, store, cfg, soft, tokens, q + t - 1, 1)?;
    Ok(g.value(out).clone())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding for a batch sharing one prompt length. Each output stops
/// after its first EOS or after `max_len` tokens.
pub fn greedy_decode_batch(
    store: &ParamStore,
    cfg: &LMConfig,
    soft: Option<(&Tensor, usize)>,
    prompts: &[Vec<usize>],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be >= 1".into()));
    }
    let eos = Vocabulary.id(Token::Eos);
    let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
    let mut out = vec![Vec::new(); prompts.len()];
    let mut done = vec![false; prompts.len()];
    for _ in 0..max_len {
        let logits = next_token_logits(store, cfg, soft, &seqs)?;
        for (b, seq) in seqs.iter_mut().enumerate() {
            let next = argmax(logits.row(b));
            seq.push(next);
            if !done[b] {
                out[b].push(next);
                done[b] = next == eos;
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(out)
}

pub fn greedy_decode(
    store: &ParamStore,
    cfg: &LMConfig,
    soft_prompt: Option<&Tensor>,
    prompt_ids: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    let soft = soft_prompt.map(|t| (t, t.rows()));
    Ok(greedy_decode_batch(store, cfg, soft, &[prompt_ids.to_vec()], max_len)?.remove(0))
}
