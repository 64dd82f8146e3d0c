use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::experiments::Table;
use crate::error::{Error, Result};
use crate::fusion::ParamTable;
use crate::numerics::AdamWConfig;

pub const REPORT_SCHEMA: u32 = 1;

/// Optimizer settings shared by every training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerInfo {
    pub adamw: AdamWConfig,
    pub clip_norm: f64,
    pub schedule: String,
}

impl Default for OptimizerInfo {
    fn default() -> Self {
        Self {
            adamw: AdamWConfig::default(),
            clip_norm: 1.0,
            schedule: "linear warmup then cosine decay".into(),
        }
    }
}

/// Serialized outcome of one command or experiment. Everything except
/// `timestamp` and `wall_clock_s` is a function of (config, seeds, code).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub experiment: String,
    pub config_hash: String,
    pub code_version: String,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
    pub optimizer: OptimizerInfo,
    pub metrics: BTreeMap<String, f64>,
    pub param_tables: BTreeMap<String, ParamTable>,
    pub details: BTreeMap<String, serde_json::Value>,
    pub tables: Vec<Table>,
    pub timestamp: u64,
    pub wall_clock_s: f64,
}

impl Report {
    pub fn new(experiment: &str, config: serde_json::Value, config_hash: &str, seeds: &[u64]) -> Self {
        Self {
            schema_version: REPORT_SCHEMA,
            experiment: experiment.into(),
            config_hash: config_hash.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seeds: seeds.to_vec(),
            config,
            optimizer: OptimizerInfo::default(),
            metrics: BTreeMap::new(),
            param_tables: BTreeMap::new(),
            details: BTreeMap::new(),
            tables: Vec::new(),
            timestamp: 0,
            wall_clock_s: 0.0,
        }
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    pub fn detail<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let v = serde_json::to_value(value).map_err(|e| Error::Data(format!("serialize {name}: {e}")))?;
        self.details.insert(name.into(), v);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON with the two time fields zeroed, for reproducibility checks.
    pub fn stable_json(&self) -> String {
        let mut r = self.clone();
        r.timestamp = 0;
        r.wall_clock_s = 0.0;
        r.to_json()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Report = serde_json::from_str(text).map_err(|e| Error::Data(format!("report: {e}")))?;
        if r.schema_version != REPORT_SCHEMA {
            return Err(Error::Data(format!(
                "report schema {} is not {REPORT_SCHEMA}",
                r.schema_version
            )));
        }
        Ok(r)
    }
}
