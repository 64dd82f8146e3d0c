use serde::{Deserialize, Serialize};

use super::{freeze, init_lm, lm_forward, LMConfig, SoftInput, LM_PREFIX};
use crate::error::Result;
use crate::numerics::{clip_global_norm, AdamW, AdamWConfig, Graph, LrSchedule, ParamStore, RngState};
use crate::synth::{caption_tokens, Scene, Token, Vocabulary, ATTRIBUTES};

const RESERVED: usize = 6;

/// Budget for the text-only language-model stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextPretrainSpec {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    /// Rows of the unordered context bag shown before each caption.
    pub context_rows: usize,
    /// Chance that a scene attribute appears in the bag.
    pub context_keep: f64,
}

impl Default for TextPretrainSpec {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 16,
            lr: 3e-3,
            warmup: 50,
            seed: 1234,
            context_rows: 8,
            context_keep: 0.5,
        }
    }
}

/// Token ids of a context bag for `scene`: each attribute value kept with
/// probability `keep`, padded with reserved tokens, shuffled.
pub fn context_bag(scene: &Scene, rows: usize, keep: f64, rng: &mut RngState) -> Vec<usize> {
    let v = Vocabulary;
    let mut bag: Vec<usize> = ATTRIBUTES
        .iter()
        .filter(|_| rng.bernoulli(keep))
        .map(|&a| v.value_id(a, scene.value(a)))
        .take(rows)
        .collect();
    while bag.len() < rows {
        bag.push(v.id(Token::Reserved(rng.below(RESERVED))));
    }
    rng.shuffle(&mut bag);
    bag
}

/// Train a fresh LM to caption random scenes, then freeze it. Each caption
/// is predicted from its BOS token with an optional bag of token embeddings
/// in front, fed through the soft-prompt path (no positions). Returns the
/// store and the per-step loss.
pub fn pretrain_text_lm(cfg: &LMConfig, spec: &TextPretrainSpec) -> Result<(ParamStore, Vec<f64>)> {
    let root = RngState::new(spec.seed);
    let mut store = ParamStore::new();
    init_lm(&mut store, cfg, &mut root.derive(0))?;
    let mut opt = AdamW::new(AdamWConfig::default());
    let sched = LrSchedule {
        peak: spec.lr,
        warmup: spec.warmup,
        total: spec.steps,
        min_ratio: 0.1,
    };
    let data = root.derive(1);
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let mut rng = data.derive(step as u64);
        let mut bags = Vec::with_capacity(spec.batch * spec.context_rows);
        let (prompts, targets): (Vec<_>, Vec<_>) = (0..spec.batch)
            .map(|_| {
                let scene = Scene::random(&mut rng);
                bags.extend(context_bag(&scene, spec.context_rows, spec.context_keep, &mut rng));
                let ids = caption_tokens(&scene).ids;
                (ids[..1].to_vec(), ids[1..].to_vec())
            })
            .unzip();
        let mut g = Graph::new();
        let soft = if spec.context_rows > 0 {
            let tok = g.param(&store, &format!("{LM_PREFIX}.tok_emb"))?;
            Some(SoftInput {
                prompt: g.embedding(tok, &bags)?,
                rows: spec.context_rows,
            })
        } else {
            None
        };
        let out = lm_forward(&mut g, &store, cfg, soft, &prompts, &targets)?;
        losses.push(g.value(out.loss).item());
        let mut grads = g.backward(out.loss)?.into_params();
        clip_global_norm(&mut grads, 1.0);
        opt.step(&mut store, &grads, sched.at(step))?;
    }
    freeze(&mut store);
    Ok((store, losses))
}
