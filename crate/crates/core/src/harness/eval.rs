use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{example, Model, Task, NOISE};
use crate::error::{Error, Result};
use crate::fusion::{attribution as fusion_attribution, KvLayout};
use crate::lm::{argmax, greedy_decode_batch, lm_forward};
use crate::numerics::{Graph, RngState};
use crate::synth::{caption_tokens, generate_scenes, Attribute, FeatureBundle, Scene, Vocabulary, ATTRIBUTES};

pub const CAPTION_METRIC: &str = "caption token accuracy (greedy decode, 4 attribute tokens + EOS)";
pub const QA_METRIC: &str = "QA accuracy (argmax over the queried attribute's 8 answers)";

/// A fixed evaluation set: scenes plus the seed of their encoder noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub scenes: Vec<Scene>,
    pub noise_seed: u64,
}

impl EvalSet {
    pub fn generate(n: usize, seed: u64) -> Result<Self> {
        let root = RngState::new(seed);
        Ok(Self {
            scenes: generate_scenes(n, &root.derive(0))?,
            noise_seed: root.derive(1).next_u64(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub batch: usize,
    /// Encoders hidden from the bridge for the whole evaluation.
    pub removed: Vec<String>,
    /// QA questions asked; all four by default.
    pub attributes: Vec<Attribute>,
    pub attribution: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch: 64,
            removed: Vec::new(),
            attributes: ATTRIBUTES.to_vec(),
            attribution: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: Task,
    pub metric: String,
    pub n_examples: usize,
    /// Caption token accuracy or mean QA accuracy.
    pub accuracy: f64,
    pub exact_match: Option<f64>,
    /// Per caption slot (caption) or per question attribute (QA).
    pub per_attribute: BTreeMap<String, f64>,
    pub loss: f64,
    /// Per-encoder share of query cross-attention, in bridge encoder order.
    pub attribution: Option<Vec<f64>>,
}

fn bundles_for(model: &Model, set: &EvalSet, idx: &[usize], removed: &[String]) -> Result<Vec<FeatureBundle>> {
    let noise = RngState::new(set.noise_seed);
    idx.iter()
        .map(|&i| {
            let mut b = model.encode(&set.scenes[i], &noise.derive(i as u64).derive(NOISE))?;
            for r in removed {
                let (k, _) = b
                    .get(r)
                    .ok_or_else(|| Error::Config(format!("cannot remove unknown encoder {r:?}")))?;
                b.drop_mask[k] = true;
            }
            Ok(b)
        })
        .collect()
}

/// Deterministic metrics of `model` on `set`.
pub fn evaluate(model: &Model, set: &EvalSet, task: Task, opts: &EvalOptions) -> Result<EvalResult> {
    if set.scenes.is_empty() || opts.batch == 0 {
        return Err(Error::InvalidArgument("empty evaluation".into()));
    }
    let v = Vocabulary;
    // QA asks every requested attribute of every scene.
    let items: Vec<(usize, Attribute)> = match task {
        Task::Caption => (0..set.scenes.len()).map(|i| (i, ATTRIBUTES[0])).collect(),
        Task::Qa => (0..set.scenes.len())
            .flat_map(|i| opts.attributes.iter().map(move |&a| (i, a)))
            .collect(),
    };
    if items.is_empty() {
        return Err(Error::InvalidArgument("no questions to ask".into()));
    }
    let mut hits: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut exact = 0usize;
    let mut loss_sum = 0.0;
    let mut attr_sum: Option<Vec<f64>> = None;
    let mut attr_weight = 0usize;
    for chunk in items.chunks(opts.batch) {
        let idx: Vec<usize> = chunk.iter().map(|&(i, _)| i).collect();
        let bundles = bundles_for(model, set, &idx, &opts.removed)?;
        let (prompts, targets): (Vec<_>, Vec<_>) = chunk
            .iter()
            .map(|&(i, a)| example(&set.scenes[i], task, a))
            .unzip();
        let mut g = Graph::new();
        let (soft, bridge_out) = model.soft_prompt(&mut g, &bundles, &prompts, KvLayout::Masked)?;
        let out = lm_forward(&mut g, &model.store, &model.lm, Some(soft), &prompts, &targets)?;
        loss_sum += g.value(out.loss).item() * chunk.len() as f64;
        if opts.attribution {
            let r = bridge_out
                .resampler
                .as_ref()
                .ok_or_else(|| Error::Config("attribution needs the multi-encoder resampler".into()))?;
            let a = fusion_attribution(&g, r)?;
            let acc = attr_sum.get_or_insert_with(|| vec![0.0; a.len()]);
            acc.iter_mut().zip(&a).for_each(|(s, x)| *s += x * chunk.len() as f64);
            attr_weight += chunk.len();
        }
        match task {
            Task::Qa => {
                let logits = g.value(out.logits);
                for (row, &(i, a)) in chunk.iter().enumerate() {
                    let range = v.value_ids(a);
                    let pick = argmax(&logits.row(row)[range]);
                    let e = hits.entry(a.name().to_string()).or_default();
                    e.0 += usize::from(pick == set.scenes[i].value(a));
                    e.1 += 1;
                }
            }
            Task::Caption => {
                let soft_t = g.value(soft.prompt).clone();
                let n_targets = targets[0].len();
                let decoded = greedy_decode_batch(&model.store, &model.lm, Some((&soft_t, soft.rows)), &prompts, n_targets)?;
                for (d, t) in decoded.iter().zip(&targets) {
                    for (slot, &want) in t.iter().enumerate() {
                        let name = if slot < ATTRIBUTES.len() { ATTRIBUTES[slot].name() } else { "eos" };
                        let e = hits.entry(name.to_string()).or_default();
                        e.0 += usize::from(d.get(slot) == Some(&want));
                        e.1 += 1;
                    }
                    exact += usize::from(d == t);
                }
            }
        }
    }
    let per_attribute: BTreeMap<String, f64> = hits
        .iter()
        .map(|(k, &(h, n))| (k.clone(), h as f64 / n as f64))
        .collect();
    let (h, n) = hits.values().fold((0, 0), |(a, b), &(h, n)| (a + h, b + n));
    Ok(EvalResult {
        task,
        metric: match task {
            Task::Caption => CAPTION_METRIC,
            Task::Qa => QA_METRIC,
        }
        .to_string(),
        n_examples: items.len(),
        accuracy: h as f64 / n as f64,
        exact_match: (task == Task::Caption).then(|| exact as f64 / items.len() as f64),
        per_attribute,
        loss: loss_sum / items.len() as f64,
        attribution: attr_sum.map(|s| s.iter().map(|x| x / attr_weight as f64).collect()),
    })
}

/// Attribution vector alone.
pub fn attribution_scores(model: &Model, set: &EvalSet, task: Task, opts: &EvalOptions) -> Result<Vec<f64>> {
    let opts = EvalOptions {
        attribution: true,
        ..opts.clone()
    };
    Ok(evaluate(model, set, task, &opts)?.attribution.expect("requested"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalRow {
    pub removed: Vec<String>,
    pub accuracy: f64,
    pub drop: f64,
    pub per_attribute: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalCurve {
    pub task: Task,
    pub metric: String,
    /// How subsets are combined per removal count.
    pub averaging: String,
    pub full: f64,
    /// `mean_drop[m]`: mean drop over all subsets with `m` encoders removed.
    pub mean_drop: Vec<f64>,
    pub rows: Vec<RemovalRow>,
}

/// Evaluate with every subset of encoders removed, keeping at least one.
pub fn removal_sweep(model: &Model, set: &EvalSet, task: Task, opts: &EvalOptions) -> Result<RemovalCurve> {
    let ids = match &model.bridge {
        crate::fusion::Bridge::Meq { cfg, .. } => cfg.encoder_ids.clone(),
        crate::fusion::Bridge::Ensemble { .. } => {
            return Err(Error::Config("removal sweep needs the multi-encoder resampler".into()))
        }
    };
    let k = ids.len();
    let mut rows = Vec::new();
    let mut full = 0.0;
    for mask in 0u32..(1 << k) - 1 {
        let removed: Vec<String> = (0..k).filter(|&e| mask & (1 << e) != 0).map(|e| ids[e].clone()).collect();
        let r = evaluate(
            model,
            set,
            task,
            &EvalOptions {
                removed: removed.clone(),
                attribution: false,
                ..opts.clone()
            },
        )?;
        if mask == 0 {
            full = r.accuracy;
        }
        rows.push(RemovalRow {
            removed,
            accuracy: r.accuracy,
            drop: full - r.accuracy,
            per_attribute: r.per_attribute,
        });
    }
    let mean_drop = (0..k)
        .map(|m| {
            let sel: Vec<f64> = rows.iter().filter(|r| r.removed.len() == m).map(|r| r.drop).collect();
            sel.iter().sum::<f64>() / sel.len() as f64
        })
        .collect();
    Ok(RemovalCurve {
        task,
        metric: match task {
            Task::Caption => CAPTION_METRIC,
            Task::Qa => QA_METRIC,
        }
        .into(),
        averaging: "uniform over subsets of each size".into(),
        full,
        mean_drop,
        rows,
    })
}

/// Ceiling of caption token accuracy for an oracle that reads visible
/// attributes perfectly and guesses invisible ones uniformly.
pub fn blind_ceiling(visible: usize) -> f64 {
    let attrs = ATTRIBUTES.len() as f64;
    (visible as f64 + (attrs - visible as f64) / crate::synth::VALUES as f64) / attrs
}

/// Ids of the caption a scene should produce.
pub fn reference_caption(scene: &Scene) -> Vec<usize> {
    caption_tokens(scene).targets().to_vec()
}
