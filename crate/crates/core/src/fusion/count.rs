use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::ParamStore;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRow {
    pub submodule: String,
    pub trainable: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
    pub trainable: usize,
    pub total: usize,
    pub trainable_fraction: f64,
}

impl ParamTable {
    /// Sum of rows whose submodule starts with `prefix`.
    pub fn trainable_under(&self, prefix: &str) -> usize {
        self.rows
            .iter()
            .filter(|r| r.submodule == prefix || r.submodule.starts_with(&format!("{prefix}.")))
            .map(|r| r.trainable)
            .sum()
    }
}

/// Submodule of a parameter: its first two name components.
fn submodule(name: &str) -> String {
    name.split('.').take(2).collect::<Vec<_>>().join(".")
}

/// Exact element counts grouped by submodule.
pub fn count_trainable_params(store: &ParamStore) -> ParamTable {
    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (name, t, trainable) in store.iter() {
        let e = groups.entry(submodule(name)).or_default();
        e.1 += t.len();
        if trainable {
            e.0 += t.len();
        }
    }
    let rows: Vec<ParamRow> = groups
        .into_iter()
        .map(|(submodule, (trainable, total))| ParamRow {
            submodule,
            trainable,
            total,
        })
        .collect();
    let trainable = rows.iter().map(|r| r.trainable).sum();
    let total = rows.iter().map(|r| r.total).sum();
    ParamTable {
        rows,
        trainable,
        total,
        trainable_fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
    }
}
