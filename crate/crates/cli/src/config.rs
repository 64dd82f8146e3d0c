//! Run configuration: a TOML file merged over the built-in defaults, then
//! `--set key=value` overrides addressed by dotted path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};
use vlfuse::harness::{Ablation, Recipe};
use vlfuse::lm::LoraConfig;

use crate::error::{CliError, CliResult};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "VLFUSE_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds of every multi-seed experiment.
    pub seeds: Vec<u64>,
    /// Seeds of the finite-difference audit.
    pub gradcheck_seeds: Vec<u64>,
    /// Rows run by `ablate`; out-of-scope rows are reported but not run.
    pub ablations: Vec<Ablation>,
    /// Scenes of the evaluation set used by removal sweeps.
    pub removal_scenes: usize,
    /// Emit SVG figures next to the reports.
    pub plots: bool,
    pub recipe: Recipe,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            gradcheck_seeds: vec![0, 1, 2, 3, 4],
            ablations: Ablation::ALL.to_vec(),
            removal_scenes: 128,
            plots: false,
            recipe: Recipe::desk(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.recipe.validate()?;
        if self.seeds.is_empty() || self.gradcheck_seeds.is_empty() {
            return Err(CliError::Config("seeds and gradcheck_seeds must not be empty".into()));
        }
        if self.removal_scenes == 0 || self.removal_scenes > self.recipe.eval_scenes {
            return Err(CliError::Config(format!(
                "removal_scenes must be in 1..={} (recipe.eval_scenes)",
                self.recipe.eval_scenes
            )));
        }
        Ok(())
    }

    /// Stable content digest: SHA-256 of the canonical JSON form, 16 hex digits.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    Value::try_from(v).expect("serializes to TOML")
}

/// Every key the file may contain: the defaults plus optional fields that
/// are absent from them.
fn schema() -> Value {
    let mut s = to_value(&RunConfig::default());
    let recipe = s["recipe"].as_table_mut().expect("recipe table");
    for lm in ["lm", "small_lm"] {
        recipe[lm]
            .as_table_mut()
            .expect("lm table")
            .insert("lora".into(), to_value(&LoraConfig::new(8)));
    }
    for stage in ["pretrain", "caption_finetune", "qa_finetune"] {
        let t = recipe[stage].as_table_mut().expect("stage table");
        t.insert("dropout_p".into(), Value::Float(0.0));
        t["trainable"]
            .as_table_mut()
            .expect("trainable table")
            .insert("rank".into(), Value::Integer(8));
    }
    s
}

fn nearest(key: &str, table: &Table, path: &str) -> String {
    let mut ranked: Vec<(usize, &String)> = table.keys().map(|k| (strsim::levenshtein(key, k), k)).collect();
    ranked.sort();
    let names: Vec<String> = ranked
        .iter()
        .take(3)
        .map(|(_, k)| if path.is_empty() { (*k).clone() } else { format!("{path}.{k}") })
        .collect();
    names.join(", ")
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

/// Reject any key not present in `schema`, naming the closest valid keys.
fn check_keys(value: &Value, schema: &Value, path: &str) -> CliResult<()> {
    match (value, schema) {
        (Value::Table(t), Value::Table(s)) => {
            for (k, v) in t {
                let p = join(path, k);
                let Some(sv) = s.get(k) else {
                    return Err(CliError::Config(format!(
                        "unknown key `{p}`; nearest valid keys: {}",
                        nearest(k, s, path)
                    )));
                };
                check_keys(v, sv, &p)?;
            }
            Ok(())
        }
        (Value::Array(items), Value::Array(s)) => match s.first() {
            Some(template @ Value::Table(_)) => {
                for (i, item) in items.iter().enumerate() {
                    check_keys(item, template, &format!("{path}[{i}]"))?;
                }
                Ok(())
            }
            _ => Ok(()),
        },
        _ => Ok(()),
    }
}

/// Overlay `over` onto `base`; tables merge key by key, everything else
/// is replaced.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Value of a `--set` right-hand side: TOML syntax when it parses, a bare
/// string otherwise.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Nested single-key table for a dotted path.
fn nest(path: &str, value: Value) -> CliResult<Value> {
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("bad override key `{path}`")));
    }
    Ok(path.rsplit('.').fold(value, |acc, k| {
        let mut t = Table::new();
        t.insert(k.to_string(), acc);
        Value::Table(t)
    }))
}

pub fn parse_override(arg: &str) -> CliResult<(String, Value)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{arg}` is not key=value")))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

/// Resolve file + overrides into a validated configuration.
pub fn resolve(text: Option<&str>, overrides: &[String]) -> CliResult<RunConfig> {
    let schema = schema();
    let mut tree = to_value(&RunConfig::default());
    if let Some(text) = text {
        let file: Value = text
            .parse::<Table>()
            .map(Value::Table)
            .map_err(|e| CliError::Config(format!("config file: {e}")))?;
        check_keys(&file, &schema, "")?;
        merge(&mut tree, file);
    }
    for o in overrides {
        let (k, v) = parse_override(o)?;
        let patch = nest(&k, v)?;
        check_keys(&patch, &schema, "")?;
        merge(&mut tree, patch);
    }
    let cfg: RunConfig = tree
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let text = match path {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?,
        ),
        None => None,
    };
    resolve(text.as_deref(), overrides)
}
