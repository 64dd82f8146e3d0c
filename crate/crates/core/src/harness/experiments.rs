//! Recipes that chain pretraining, fine-tuning and evaluation, plus the
//! comparisons built on them. A [`Lab`] caches every trained model by arm and
//! seed so experiments that share runs train them once.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::checkpoint::reference_store;
use super::eval::{evaluate, EvalOptions, EvalResult, EvalSet};
use super::model::{train, Model, Task, TrainReport, TrainSpec, TrainableSet};
use crate::checkpoint::check_shapes;
use crate::error::{Error, Result};
use crate::fusion::{count_trainable_params, Bridge, FusionConfig};
use crate::lm::{pretrain_text_lm, LMConfig, SizeTier, TextPretrainSpec};
use crate::numerics::{ParamStore, RngState};
use crate::synth::{desk_encoder_specs, EncoderSpec};

/// Every knob of the desk pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub lm: LMConfig,
    /// LM used by the language-model size ablation.
    pub small_lm: LMConfig,
    pub lm_pretrain: TextPretrainSpec,
    pub encoders: Vec<EncoderSpec>,
    pub fusion: FusionConfig,
    pub pretrain: TrainSpec,
    pub caption_finetune: TrainSpec,
    pub qa_finetune: TrainSpec,
    /// Joint steps run by the ensemble after loading its pretrained members.
    pub ensemble_joint_steps: usize,
    pub eval_scenes: usize,
    pub eval_seed: u64,
    pub eval_batch: usize,
}

impl Recipe {
    pub fn desk() -> Self {
        let lm = LMConfig::tier(SizeTier::Base);
        let encoders = desk_encoder_specs();
        let fusion = FusionConfig::for_encoders(&encoders, lm.d_lm);
        Self {
            small_lm: LMConfig::tier(SizeTier::Small),
            lm_pretrain: TextPretrainSpec::default(),
            pretrain: TrainSpec::pretrain(3000, 0),
            caption_finetune: TrainSpec::finetune(Task::Caption, TrainableSet::FusionOnly, 200, 0),
            qa_finetune: TrainSpec::finetune(Task::Qa, TrainableSet::FusionLm, 200, 0),
            ensemble_joint_steps: 300,
            eval_scenes: 512,
            eval_seed: 99,
            eval_batch: 64,
            lm,
            encoders,
            fusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.small_lm.validate()?;
        self.fusion.validate()?;
        for s in &self.encoders {
            s.validate()?;
        }
        let ids: Vec<&str> = self.encoders.iter().map(|s| s.id.as_str()).collect();
        let cfg_ids: Vec<&str> = self.fusion.encoder_ids.iter().map(String::as_str).collect();
        if ids != cfg_ids {
            return Err(Error::Config(format!("fusion.encoder_ids {cfg_ids:?} differ from encoders {ids:?}")));
        }
        for (k, s) in self.encoders.iter().enumerate() {
            if self.fusion.feat_dims[k] != s.feat_dim || self.fusion.seq_lens[k] != s.seq_len {
                return Err(Error::Config(format!(
                    "encoder {}: fusion expects {}x{} but the encoder emits {}x{}",
                    s.id, self.fusion.seq_lens[k], self.fusion.feat_dims[k], s.seq_len, s.feat_dim
                )));
            }
        }
        if self.fusion.d_lm != self.lm.d_lm {
            return Err(Error::Config(format!(
                "fusion.d_lm {} differs from lm.d_lm {}",
                self.fusion.d_lm, self.lm.d_lm
            )));
        }
        for (name, spec) in [
            ("pretrain", &self.pretrain),
            ("caption_finetune", &self.caption_finetune),
            ("qa_finetune", &self.qa_finetune),
        ] {
            spec.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if self.caption_finetune.task != Task::Caption || self.qa_finetune.task != Task::Qa {
            return Err(Error::Config("caption_finetune and qa_finetune must keep their tasks".into()));
        }
        if self.eval_scenes == 0 || self.eval_batch == 0 {
            return Err(Error::Config("eval_scenes and eval_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            batch: self.eval_batch,
            ..EvalOptions::default()
        }
    }
}

/// One model variant. Everything not named here follows the recipe.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Meq,
    Single(String),
    /// Per-encoder resamplers loaded from the singles, then trained jointly.
    Ensemble,
    NoDropout,
    NoTextInput,
    SmallLm,
}

impl Arm {
    pub fn label(&self) -> String {
        match self {
            Arm::Single(id) => format!("single-{id}"),
            Arm::Meq => "meq".into(),
            Arm::Ensemble => "ensemble".into(),
            Arm::NoDropout => "no-dropout".into(),
            Arm::NoTextInput => "no-text-input".into(),
            Arm::SmallLm => "small-lm".into(),
        }
    }
}

const INIT: u64 = 0;
const PRETRAIN: u64 = 1;
const JOINT: u64 = 2;
const FINETUNE: u64 = 3;

fn sub_seed(seed: u64, stream: u64) -> u64 {
    RngState::new(seed).derive(stream).next_u64()
}

/// Summary of one training run kept by the lab.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub trainable_params: usize,
    /// Parameters whose bits changed.
    pub moved: Vec<String>,
    pub losses: Vec<f64>,
}

type FinetuneKey = (Arm, u64, Task, TrainableSet);

/// Trained-model cache over one recipe.
#[derive(Debug)]
pub struct Lab {
    pub recipe: Recipe,
    pub eval_set: EvalSet,
    lms: BTreeMap<String, ParamStore>,
    pretrained: BTreeMap<(Arm, u64), Model>,
    finetuned: BTreeMap<FinetuneKey, Model>,
    pub runs: Vec<RunRecord>,
}

impl Lab {
    pub fn new(recipe: Recipe) -> Result<Self> {
        recipe.validate()?;
        let eval_set = EvalSet::generate(recipe.eval_scenes, recipe.eval_seed)?;
        Ok(Self {
            recipe,
            eval_set,
            lms: BTreeMap::new(),
            pretrained: BTreeMap::new(),
            finetuned: BTreeMap::new(),
            runs: Vec::new(),
        })
    }

    fn record(&mut self, label: String, seed: u64, r: &TrainReport) {
        self.runs.push(RunRecord {
            label,
            seed,
            steps: r.spec.steps,
            first_loss: r.losses.first().copied(),
            last_loss: r.losses.last().copied(),
            trainable_params: r.trainable_params,
            moved: r.moved.clone(),
            losses: r.losses.clone(),
        });
    }

    /// Text-pretrained, frozen LM of the given configuration.
    pub fn lm_store(&mut self, cfg: &LMConfig) -> Result<&ParamStore> {
        let key = serde_json::to_string(cfg).expect("config serializes");
        if !self.lms.contains_key(&key) {
            let (store, _) = pretrain_text_lm(cfg, &self.recipe.lm_pretrain)?;
            self.lms.insert(key.clone(), store);
        }
        Ok(&self.lms[&key])
    }

    /// Bridge and LM configuration of an arm.
    pub fn arm_config(&self, arm: &Arm) -> Result<(Bridge, LMConfig)> {
        let r = &self.recipe;
        let mut fusion = r.fusion.clone();
        let mut lm = r.lm.clone();
        let bridge = match arm {
            Arm::Meq => Bridge::meq(fusion),
            Arm::Single(id) => Bridge::single(&fusion, id)?,
            Arm::Ensemble => Bridge::ensemble(&fusion)?,
            Arm::NoDropout => {
                fusion.dropout_p = 0.0;
                Bridge::meq(fusion)
            }
            Arm::NoTextInput => {
                fusion.text_input = false;
                Bridge::meq(fusion)
            }
            Arm::SmallLm => {
                lm = r.small_lm.clone();
                fusion.d_lm = lm.d_lm;
                Bridge::meq(fusion)
            }
        };
        Ok((bridge, lm))
    }

    /// Untrained model of an arm on top of its frozen LM.
    pub fn fresh(&mut self, arm: &Arm, seed: u64) -> Result<Model> {
        let (bridge, lm) = self.arm_config(arm)?;
        self.lm_store(&lm)?;
        let key = serde_json::to_string(&lm).expect("config serializes");
        Model::new(bridge, lm, &self.lms[&key], &self.recipe.encoders, sub_seed(seed, INIT))
    }

    /// Pretrained model of an arm, trained on first use.
    pub fn pretrained(&mut self, arm: &Arm, seed: u64) -> Result<&Model> {
        let key = (arm.clone(), seed);
        if !self.pretrained.contains_key(&key) {
            let model = match arm {
                Arm::Ensemble => self.pretrain_ensemble(seed)?,
                _ => {
                    let mut m = self.fresh(arm, seed)?;
                    let r = train(&mut m, &self.pretrain_spec(seed))?;
                    self.record(format!("pretrain/{}", arm.label()), seed, &r);
                    m
                }
            };
            self.pretrained.insert(key.clone(), model);
        }
        Ok(&self.pretrained[&key])
    }

    fn pretrain_ensemble(&mut self, seed: u64) -> Result<Model> {
        let ids = self.recipe.fusion.encoder_ids.clone();
        let mut m = self.fresh(&Arm::Ensemble, seed)?;
        for id in &ids {
            let single = self.pretrained(&Arm::Single(id.clone()), seed)?;
            let (from, to) = (format!("qf.{id}."), format!("ens.{id}."));
            let copied = m
                .store
                .load_values_from(&single.store, |n| n.strip_prefix(&from).map(|r| format!("{to}{r}")).unwrap_or_default())?;
            let expected = m.store.names().filter(|n| n.starts_with(&to)).count();
            if copied != expected {
                return Err(Error::Config(format!(
                    "ensemble member {id}: loaded {copied} of {expected} tensors"
                )));
            }
        }
        let mut spec = self.recipe.pretrain.clone();
        spec.steps = self.recipe.ensemble_joint_steps;
        spec.warmup = spec.warmup.min(spec.steps / 4);
        spec.seed = sub_seed(seed, JOINT);
        let r = train(&mut m, &spec)?;
        self.record("pretrain/ensemble-joint".into(), seed, &r);
        Ok(m)
    }

    /// Pretrained arm fine-tuned on `task` with the given trainable set.
    pub fn finetuned(&mut self, arm: &Arm, seed: u64, task: Task, trainable: TrainableSet) -> Result<&Model> {
        let key = (arm.clone(), seed, task, trainable);
        if !self.finetuned.contains_key(&key) {
            let mut m = self.pretrained(arm, seed)?.clone();
            let r = train(&mut m, &self.finetune_spec(seed, task, trainable))?;
            self.record(format!("finetune/{}/{task:?}/{trainable:?}", arm.label()), seed, &r);
            self.finetuned.insert(key.clone(), m);
        }
        Ok(&self.finetuned[&key])
    }

    pub fn pretrain_spec(&self, seed: u64) -> TrainSpec {
        let mut spec = self.recipe.pretrain.clone();
        spec.seed = sub_seed(seed, PRETRAIN);
        spec
    }

    pub fn finetune_spec(&self, seed: u64, task: Task, trainable: TrainableSet) -> TrainSpec {
        let mut spec = match task {
            Task::Caption => self.recipe.caption_finetune.clone(),
            Task::Qa => self.recipe.qa_finetune.clone(),
        };
        spec.trainable = trainable;
        spec.seed = sub_seed(seed, FINETUNE);
        spec
    }

    /// Use `model` as the pretrained state of an arm, e.g. one loaded from
    /// a checkpoint. Its layout must match the arm's configuration.
    pub fn insert_pretrained(&mut self, arm: &Arm, seed: u64, model: Model) -> Result<()> {
        let (bridge, lm) = self.arm_config(arm)?;
        let reference = reference_store(&bridge, &lm, &self.recipe.encoders)?;
        check_shapes(&model.store, &reference)?;
        if model.bridge != bridge || model.lm != lm {
            return Err(Error::Checkpoint(format!("checkpoint does not hold the {} arm of this config", arm.label())));
        }
        self.pretrained.insert((arm.clone(), seed), model);
        self.finetuned.retain(|k, _| !(k.0 == *arm && k.1 == seed));
        Ok(())
    }

    /// Fine-tuned with the recipe's default trainable set for `task`.
    pub fn default_finetuned(&mut self, arm: &Arm, seed: u64, task: Task) -> Result<&Model> {
        let trainable = match task {
            Task::Caption => self.recipe.caption_finetune.trainable,
            Task::Qa => self.recipe.qa_finetune.trainable,
        };
        self.finetuned(arm, seed, task, trainable)
    }

    pub fn evaluate(&self, model: &Model, task: Task) -> Result<EvalResult> {
        evaluate(model, &self.eval_set, task, &self.recipe.eval_options())
    }

    /// Resampler parameters an arm trains during pretraining.
    pub fn resampler_params(&mut self, arm: &Arm) -> Result<usize> {
        let mut m = self.fresh(arm, 0)?;
        m.configure_trainable(TrainableSet::FusionOnly, &mut RngState::new(0))?;
        let table = count_trainable_params(&m.store);
        Ok(m.bridge.prefixes().iter().map(|p| table.trainable_under(p)).sum())
    }
}

/// Tabular view used for flat exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialistRow {
    pub seed: u64,
    pub fused: f64,
    pub singles: BTreeMap<String, f64>,
    pub best_single: f64,
    pub margin: f64,
}

/// Fused caption accuracy against every single-encoder baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialistComparison {
    pub metric: String,
    pub rows: Vec<SpecialistRow>,
    pub min_margin: f64,
}

impl SpecialistComparison {
    pub fn table(&self) -> Table {
        let ids: Vec<String> = self.rows.first().map(|r| r.singles.keys().cloned().collect()).unwrap_or_default();
        let mut header = vec!["seed".to_string(), "fused".into()];
        header.extend(ids.iter().map(|i| format!("single_{i}")));
        header.extend(["best_single".into(), "margin".into()]);
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.seed.to_string(), fmt(r.fused)];
                row.extend(ids.iter().map(|i| fmt(r.singles[i])));
                row.extend([fmt(r.best_single), fmt(r.margin)]);
                row
            })
            .collect();
        Table {
            name: "specialists".into(),
            header,
            rows,
        }
    }
}

pub fn fusion_vs_specialists(lab: &mut Lab, seeds: &[u64]) -> Result<SpecialistComparison> {
    let ids = lab.recipe.fusion.encoder_ids.clone();
    let mut rows = Vec::new();
    let mut metric = String::new();
    for &seed in seeds {
        let fused = {
            let m = lab.default_finetuned(&Arm::Meq, seed, Task::Caption)?.clone();
            let e = lab.evaluate(&m, Task::Caption)?;
            metric = e.metric;
            e.accuracy
        };
        let mut singles = BTreeMap::new();
        for id in &ids {
            let m = lab.default_finetuned(&Arm::Single(id.clone()), seed, Task::Caption)?.clone();
            singles.insert(id.clone(), lab.evaluate(&m, Task::Caption)?.accuracy);
        }
        let best_single = singles.values().copied().fold(f64::NEG_INFINITY, f64::max);
        rows.push(SpecialistRow {
            seed,
            fused,
            singles,
            best_single,
            margin: fused - best_single,
        });
    }
    let min_margin = rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
    Ok(SpecialistComparison { metric, rows, min_margin })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRow {
    pub seed: u64,
    pub meq: f64,
    pub ensemble: f64,
    pub best_single: f64,
}

/// Shared resampler against per-encoder resamplers trained jointly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleComparison {
    pub metric: String,
    pub meq_resampler_params: usize,
    pub ensemble_resampler_params: usize,
    /// MEQ over ensemble trainable resampler parameters.
    pub param_ratio: f64,
    pub ensemble_joint_steps: usize,
    pub rows: Vec<EnsembleRow>,
}

impl EnsembleComparison {
    pub fn table(&self) -> Table {
        Table {
            name: "ensemble".into(),
            header: ["seed", "meq", "ensemble", "meq_minus_ensemble", "best_single"].map(String::from).to_vec(),
            rows: self
                .rows
                .iter()
                .map(|r| vec![r.seed.to_string(), fmt(r.meq), fmt(r.ensemble), fmt(r.meq - r.ensemble), fmt(r.best_single)])
                .collect(),
        }
    }
}

pub fn compare_ensemble(lab: &mut Lab, seeds: &[u64]) -> Result<EnsembleComparison> {
    let meq_resampler_params = lab.resampler_params(&Arm::Meq)?;
    let ensemble_resampler_params = lab.resampler_params(&Arm::Ensemble)?;
    let ids = lab.recipe.fusion.encoder_ids.clone();
    let mut rows = Vec::new();
    let mut metric = String::new();
    for &seed in seeds {
        let qa = |lab: &mut Lab, arm: Arm| -> Result<EvalResult> {
            let m = lab.default_finetuned(&arm, seed, Task::Qa)?.clone();
            lab.evaluate(&m, Task::Qa)
        };
        let meq = qa(lab, Arm::Meq)?;
        let ensemble = qa(lab, Arm::Ensemble)?.accuracy;
        let mut best_single = f64::NEG_INFINITY;
        for id in &ids {
            best_single = best_single.max(qa(lab, Arm::Single(id.clone()))?.accuracy);
        }
        metric = meq.metric;
        rows.push(EnsembleRow {
            seed,
            meq: meq.accuracy,
            ensemble,
            best_single,
        });
    }
    Ok(EnsembleComparison {
        metric,
        meq_resampler_params,
        ensemble_resampler_params,
        param_ratio: meq_resampler_params as f64 / ensemble_resampler_params as f64,
        ensemble_joint_steps: lab.recipe.ensemble_joint_steps,
        rows,
    })
}

/// Rows of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    /// LM fine-tuning mode: frozen, LoRA, full.
    A1,
    /// Synthetic QA training data; not modelled.
    A2,
    /// Encoder dropout off.
    A3,
    /// Text prompt removed from the resampler input.
    A4,
    /// High-resolution fine-tuning; not modelled.
    A5,
    /// Smaller LM.
    A8,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [Ablation::A1, Ablation::A2, Ablation::A3, Ablation::A4, Ablation::A5, Ablation::A8];

    pub fn description(&self) -> &'static str {
        match self {
            Ablation::A1 => "LM fine-tuning mode (frozen / LoRA / full)",
            Ablation::A2 => "synthetic QA data",
            Ablation::A3 => "encoder dropout off",
            Ablation::A4 => "no text input to the resampler",
            Ablation::A5 => "high-resolution fine-tuning",
            Ablation::A8 => "small LM tier",
        }
    }

    pub fn in_scope(&self) -> bool {
        !matches!(self, Ablation::A2 | Ablation::A5)
    }
}

/// One evaluated variant inside an ablation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub label: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub delta_vs_base: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub id: Ablation,
    pub description: String,
    /// `run` or `out of scope`.
    pub status: String,
    pub variants: Vec<VariantResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub metric: String,
    pub seeds: Vec<u64>,
    pub base_label: String,
    pub base: Vec<f64>,
    pub rows: Vec<AblationRow>,
    /// LoRA(r=8) and full fine-tune trainable parameter counts, when A1 ran.
    pub lora_trainable: Option<usize>,
    pub full_trainable: Option<usize>,
}

impl AblationGrid {
    pub fn variant(&self, label: &str) -> Option<&VariantResult> {
        self.rows.iter().flat_map(|r| &r.variants).find(|v| v.label == label)
    }

    pub fn table(&self) -> Table {
        let mut rows = vec![vec![
            "A0".to_string(),
            "base".into(),
            "run".into(),
            self.base_label.clone(),
            fmt(mean(&self.base)),
            fmt(0.0),
            self.base.iter().map(|x| fmt(*x)).collect::<Vec<_>>().join(" "),
        ]];
        for r in &self.rows {
            if r.variants.is_empty() {
                rows.push(vec![
                    format!("{:?}", r.id),
                    r.description.clone(),
                    r.status.clone(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ]);
            }
            for v in &r.variants {
                rows.push(vec![
                    format!("{:?}", r.id),
                    r.description.clone(),
                    r.status.clone(),
                    v.label.clone(),
                    fmt(v.mean),
                    fmt(v.delta_vs_base),
                    v.per_seed.iter().map(|x| fmt(*x)).collect::<Vec<_>>().join(" "),
                ]);
            }
        }
        Table {
            name: "ablations".into(),
            header: ["id", "description", "status", "variant", "mean", "delta_vs_base", "per_seed"]
                .map(String::from)
                .to_vec(),
            rows,
        }
    }
}

pub const LORA_RANK: usize = 8;

/// QA accuracy of the base recipe and of each requested ablation.
pub fn ablation_grid(lab: &mut Lab, seeds: &[u64], rows: &[Ablation]) -> Result<AblationGrid> {
    let base_trainable = lab.recipe.qa_finetune.trainable;
    let mut metric = String::new();
    let mut qa = |lab: &mut Lab, arm: Arm, trainable: TrainableSet| -> Result<Vec<f64>> {
        seeds
            .iter()
            .map(|&s| {
                let m = lab.finetuned(&arm, s, Task::Qa, trainable)?.clone();
                let e = lab.evaluate(&m, Task::Qa)?;
                metric = e.metric;
                Ok(e.accuracy)
            })
            .collect()
    };
    let base = qa(lab, Arm::Meq, base_trainable)?;
    let variant = |label: &str, per_seed: Vec<f64>| VariantResult {
        label: label.into(),
        mean: mean(&per_seed),
        delta_vs_base: mean(&per_seed) - mean(&base),
        per_seed,
    };
    let mut out = Vec::new();
    let (mut lora_trainable, mut full_trainable) = (None, None);
    for &id in rows {
        let variants = match id {
            Ablation::A2 | Ablation::A5 => Vec::new(),
            Ablation::A1 => {
                let mut v = Vec::new();
                for (label, t) in [
                    ("frozen-lm", TrainableSet::FusionOnly),
                    ("lora-r8", TrainableSet::FusionLora { rank: LORA_RANK }),
                    ("full-lm", TrainableSet::FusionLm),
                ] {
                    v.push(variant(label, qa(lab, Arm::Meq, t)?));
                }
                let s = seeds[0];
                lora_trainable = Some(lab.finetuned(&Arm::Meq, s, Task::Qa, TrainableSet::FusionLora { rank: LORA_RANK })?.store.trainable_numel());
                full_trainable = Some(lab.finetuned(&Arm::Meq, s, Task::Qa, TrainableSet::FusionLm)?.store.trainable_numel());
                v
            }
            Ablation::A3 => vec![variant("no-dropout", qa(lab, Arm::NoDropout, base_trainable)?)],
            Ablation::A4 => vec![variant("no-text-input", qa(lab, Arm::NoTextInput, base_trainable)?)],
            Ablation::A8 => vec![variant("small-lm", qa(lab, Arm::SmallLm, base_trainable)?)],
        };
        out.push(AblationRow {
            id,
            description: id.description().into(),
            status: if id.in_scope() { "run" } else { "out of scope" }.into(),
            variants,
        });
    }
    Ok(AblationGrid {
        metric,
        seeds: seeds.to_vec(),
        base_label: format!("meq/{base_trainable:?}"),
        base,
        rows: out,
        lora_trainable,
        full_trainable,
    })
}
