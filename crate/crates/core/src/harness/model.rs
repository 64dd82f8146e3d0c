use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{encoder_dropout, Bridge, KvLayout, Phase};
use crate::lm::{lm_forward, lora_wrap, unfreeze, LMConfig, LoraConfig, SoftInput, LM_PREFIX};
use crate::numerics::{clip_global_norm, AdamW, AdamWConfig, Graph, LrSchedule, ParamStore, RngState, Var};
use crate::synth::{
    caption_tokens, encode_all, qa_tokens, Attribute, EncoderSpec, FeatureBundle, MockEncoder, Scene, ATTRIBUTES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Caption,
    /// Uniform mixture of the four attribute questions.
    Qa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TrainableSet {
    FusionOnly,
    FusionLm,
    FusionLora { rank: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub stage: Stage,
    pub task: Task,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub min_lr_ratio: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub trainable: TrainableSet,
    /// Overrides the bridge's encoder-drop probability when set.
    #[serde(default)]
    pub dropout_p: Option<f64>,
}

impl TrainSpec {
    pub fn pretrain(steps: usize, seed: u64) -> Self {
        Self {
            stage: Stage::Pretrain,
            task: Task::Caption,
            steps,
            batch: 8,
            lr: 2e-3,
            warmup: 100,
            min_lr_ratio: 0.1,
            clip_norm: 1.0,
            seed,
            trainable: TrainableSet::FusionOnly,
            dropout_p: None,
        }
    }

    pub fn finetune(task: Task, trainable: TrainableSet, steps: usize, seed: u64) -> Self {
        Self {
            stage: Stage::Finetune,
            task,
            steps,
            batch: 8,
            lr: 1e-3,
            warmup: 30,
            min_lr_ratio: 0.1,
            clip_norm: 1.0,
            seed,
            trainable,
            dropout_p: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage == Stage::Pretrain && self.trainable != TrainableSet::FusionOnly {
            return Err(Error::Config("pretraining keeps the LM frozen: trainable must be fusion-only".into()));
        }
        if self.stage == Stage::Pretrain && self.task != Task::Caption {
            return Err(Error::Config("pretraining uses the captioning objective".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr and clip_norm must be positive".into()));
        }
        if let Some(p) = self.dropout_p {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("dropout_p {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Encoders, bridge and LM with all parameters in one store.
#[derive(Debug, Clone)]
pub struct Model {
    pub bridge: Bridge,
    pub lm: LMConfig,
    pub encoders: Vec<MockEncoder>,
    pub store: ParamStore,
}

/// Per-step sample streams.
pub(crate) const SCENE: u64 = 0;
pub(crate) const NOISE: u64 = 1;
pub(crate) const DROP: u64 = 2;
pub(crate) const QUESTION: u64 = 3;

impl Model {
    /// Fresh bridge (seeded) on top of the given frozen LM parameters.
    pub fn new(bridge: Bridge, lm: LMConfig, lm_store: &ParamStore, specs: &[EncoderSpec], seed: u64) -> Result<Self> {
        if bridge.d_lm() != lm.d_lm {
            return Err(Error::Config(format!(
                "bridge emits width {} but the LM expects {}",
                bridge.d_lm(),
                lm.d_lm
            )));
        }
        let mut store = ParamStore::new();
        let encoders = specs
            .iter()
            .map(|s| MockEncoder::new(s.clone()))
            .collect::<Result<Vec<_>>>()?;
        for e in &encoders {
            e.register(&mut store)?;
        }
        for (name, t, trainable) in lm_store.iter() {
            if name.starts_with(&format!("{LM_PREFIX}.")) {
                store.insert(name, t.clone(), trainable)?;
            }
        }
        bridge.init(&mut store, &mut RngState::new(seed))?;
        Ok(Self {
            bridge,
            lm,
            encoders,
            store,
        })
    }

    pub fn encode(&self, scene: &Scene, rng: &RngState) -> Result<FeatureBundle> {
        encode_all(scene, &self.encoders, rng)
    }

    /// Soft prompt for a batch: bridge output as LM input rows.
    pub fn soft_prompt(
        &self,
        g: &mut Graph,
        bundles: &[FeatureBundle],
        text: &[Vec<usize>],
        layout: KvLayout,
    ) -> Result<(SoftInput, crate::fusion::BridgeOutput)> {
        let out = self.bridge.forward(g, &self.store, bundles, Some(text), layout)?;
        Ok((
            SoftInput {
                prompt: out.prompt,
                rows: out.num_queries,
            },
            out,
        ))
    }

    /// Apply a trainable set: the bridge always trains, the LM per `set`.
    pub fn configure_trainable(&mut self, set: TrainableSet, rng: &mut RngState) -> Result<()> {
        for p in self.bridge.prefixes() {
            self.store.set_trainable_prefix(&format!("{p}."), true);
        }
        match set {
            TrainableSet::FusionOnly => crate::lm::freeze(&mut self.store),
            TrainableSet::FusionLm => unfreeze(&mut self.store),
            TrainableSet::FusionLora { rank } => {
                if self.lm.lora.is_none() {
                    lora_wrap(&mut self.store, &mut self.lm, LoraConfig::new(rank), rng)?;
                } else {
                    crate::lm::freeze(&mut self.store);
                }
            }
        }
        Ok(())
    }

    pub fn lm_frozen(&self) -> bool {
        self.store
            .iter()
            .filter(|(n, _, _)| n.starts_with(&format!("{LM_PREFIX}.")) && !n.contains(".lora_"))
            .all(|(_, _, t)| !t)
    }
}

/// Prompt and targets of one training/eval example.
pub(crate) fn example(scene: &Scene, task: Task, attribute: Attribute) -> (Vec<usize>, Vec<usize>) {
    match task {
        Task::Caption => {
            let c = caption_tokens(scene);
            (c.prompt().to_vec(), c.targets().to_vec())
        }
        Task::Qa => {
            let (p, a) = qa_tokens(scene, attribute.name()).expect("known attribute");
            (p, vec![a])
        }
    }
}

pub(crate) struct Batch {
    pub bundles: Vec<FeatureBundle>,
    pub prompts: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

/// Draw the training batch of `step`: scenes, encoder noise, encoder
/// dropout and question choice each come from their own derived stream.
pub(crate) fn training_batch(model: &Model, spec: &TrainSpec, step: usize) -> Result<Batch> {
    let root = RngState::new(spec.seed).derive(step as u64);
    let dropout = model
        .bridge
        .dropout()
        .map(|(p, mode)| (spec.dropout_p.unwrap_or(p), mode));
    let mut batch = Batch {
        bundles: Vec::with_capacity(spec.batch),
        prompts: Vec::with_capacity(spec.batch),
        targets: Vec::with_capacity(spec.batch),
    };
    for b in 0..spec.batch {
        let s = root.derive(b as u64);
        let scene = Scene::random(&mut s.derive(SCENE));
        let mut bundle = model.encode(&scene, &s.derive(NOISE))?;
        if let Some((p, mode)) = dropout {
            bundle = encoder_dropout(&bundle, p, mode, &mut s.derive(DROP), Phase::Train);
        }
        let attribute = ATTRIBUTES[s.derive(QUESTION).below(ATTRIBUTES.len())];
        let (p, t) = example(&scene, spec.task, attribute);
        batch.bundles.push(bundle);
        batch.prompts.push(p);
        batch.targets.push(t);
    }
    Ok(batch)
}

/// Training loss of a batch under the current parameters.
pub(crate) fn batch_loss(g: &mut Graph, model: &Model, batch: &Batch) -> Result<Var> {
    let (soft, _) = model.soft_prompt(g, &batch.bundles, &batch.prompts, KvLayout::Masked)?;
    Ok(lm_forward(g, &model.store, &model.lm, Some(soft), &batch.prompts, &batch.targets)?.loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub spec: TrainSpec,
    pub losses: Vec<f64>,
    /// Parameters whose bits changed during the run.
    pub moved: Vec<String>,
    pub trainable_params: usize,
}

/// Run `spec.steps` optimizer steps. On a numeric failure the model keeps
/// the parameters of the last completed step and the error is returned.
pub fn train(model: &mut Model, spec: &TrainSpec) -> Result<TrainReport> {
    spec.validate()?;
    model.configure_trainable(spec.trainable, &mut RngState::new(spec.seed).derive(u64::MAX))?;
    let before = model.store.clone();
    let mut opt = AdamW::new(AdamWConfig::default());
    let sched = LrSchedule {
        peak: spec.lr,
        warmup: spec.warmup.min(spec.steps),
        total: spec.steps,
        min_ratio: spec.min_lr_ratio,
    };
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let batch = training_batch(model, spec, step)?;
        let mut g = Graph::new();
        let loss = batch_loss(&mut g, model, &batch)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step} is {value}")));
        }
        let mut grads = g.backward(loss)?.into_params();
        clip_global_norm(&mut grads, spec.clip_norm);
        opt.step(&mut model.store, &grads, sched.at(step))?;
        losses.push(value);
    }
    let moved = model
        .store
        .iter()
        .filter(|(n, t, _)| before.get(n).map_or(true, |b| !b.bit_eq(t)))
        .map(|(n, _, _)| n.to_string())
        .collect();
    Ok(TrainReport {
        spec: spec.clone(),
        losses,
        moved,
        trainable_params: model.store.trainable_numel(),
    })
}
