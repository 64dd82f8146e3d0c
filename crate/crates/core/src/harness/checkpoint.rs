//! Whole-model checkpoints on top of [`crate::checkpoint`]: the manifest
//! config holds the bridge, LM and encoder configurations, so a directory
//! alone rebuilds the model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::checkpoint::{check_shapes, load_checkpoint, save_checkpoint, Manifest};
use crate::error::{Error, Result};
use crate::fusion::Bridge;
use crate::lm::{init_lm, lora_wrap, LMConfig};
use crate::numerics::{ParamStore, RngState};
use crate::synth::{EncoderSpec, MockEncoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub config_hash: String,
    pub bridge: Bridge,
    pub lm: LMConfig,
    pub encoders: Vec<EncoderSpec>,
}

impl ModelMeta {
    pub fn of(model: &Model, config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            bridge: model.bridge.clone(),
            lm: model.lm.clone(),
            encoders: model.encoders.iter().map(|e| e.spec.clone()).collect(),
        }
    }
}

pub fn save_model(model: &Model, dir: &Path, config_hash: &str, seed: u64) -> Result<Manifest> {
    let meta = serde_json::to_value(ModelMeta::of(model, config_hash))?;
    save_checkpoint(dir, &model.store, &meta, seed)
}

pub fn load_model(dir: &Path) -> Result<(Model, ModelMeta, u64)> {
    let ck = load_checkpoint(dir)?;
    let meta: ModelMeta = serde_json::from_value(ck.config)
        .map_err(|e| Error::Checkpoint(format!("manifest config is not a model: {e}")))?;
    check_shapes(&ck.store, &reference_store(&meta.bridge, &meta.lm, &meta.encoders)?)?;
    let encoders = meta
        .encoders
        .iter()
        .map(|s| MockEncoder::from_store(s.clone(), &ck.store))
        .collect::<Result<Vec<_>>>()?;
    let model = Model {
        bridge: meta.bridge.clone(),
        lm: meta.lm.clone(),
        encoders,
        store: ck.store,
    };
    Ok((model, meta, ck.seed))
}

/// Store with the names and shapes a model of these configurations owns.
/// Values are placeholders; only the layout is meaningful.
pub fn reference_store(bridge: &Bridge, lm: &LMConfig, encoders: &[EncoderSpec]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut rng = RngState::new(0);
    let mut base = lm.clone();
    base.lora = None;
    init_lm(&mut store, &base, &mut rng)?;
    if let Some(lora) = &lm.lora {
        lora_wrap(&mut store, &mut base, lora.clone(), &mut rng)?;
    }
    for s in encoders {
        MockEncoder::new(s.clone())?.register(&mut store)?;
    }
    bridge.init(&mut store, &mut rng)?;
    Ok(store)
}
