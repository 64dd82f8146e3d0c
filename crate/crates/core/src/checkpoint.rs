//! Checkpoints: a JSON manifest plus a blob of little-endian `f64` values in
//! manifest order. Loading after saving reproduces every bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub config: serde_json::Value,
    pub seed: u64,
}

/// Bytes of every tensor whose name starts with `prefix`, in name order.
pub fn param_bytes(store: &ParamStore, prefix: &str) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t, _) in store.iter() {
        if name.starts_with(prefix) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(dir: &Path, store: &ParamStore, config: &serde_json::Value, seed: u64) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(store.numel() * 8);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t, trainable) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
            trainable,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: "f64-le".into(),
        seed,
        config: config.clone(),
        tensors,
        blob_bytes: blob.len(),
    };
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} not supported (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    if m.dtype != "f64-le" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", m.dtype)));
    }
    Ok(m)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let m = read_manifest(dir)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    if blob.len() != m.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, manifest says {}",
            blob.len(),
            m.blob_bytes
        )));
    }
    let mut store = ParamStore::new();
    let mut expect = 0;
    for e in &m.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expect || e.offset + n * 8 > blob.len() {
            return Err(Error::Checkpoint(format!("tensor {} has a bad offset", e.name)));
        }
        let data = blob[e.offset..e.offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(&e.name, Tensor::new(e.shape.clone(), data)?, e.trainable)?;
        expect = e.offset + n * 8;
    }
    if expect != blob.len() {
        return Err(Error::Checkpoint("blob has trailing bytes".into()));
    }
    Ok(Checkpoint {
        store,
        config: m.config,
        seed: m.seed,
    })
}

/// Check that `store` has exactly the names and shapes of `reference`,
/// listing every difference.
pub fn check_shapes(store: &ParamStore, reference: &ParamStore) -> Result<()> {
    let mut diffs = Vec::new();
    for (name, t, _) in reference.iter() {
        match store.get(name) {
            None => diffs.push(format!("missing {name} {:?}", t.shape())),
            Some(s) if s.shape() != t.shape() => {
                diffs.push(format!("{name}: checkpoint {:?} vs config {:?}", s.shape(), t.shape()))
            }
            _ => {}
        }
    }
    for name in store.names() {
        if !reference.contains(name) {
            diffs.push(format!("unexpected {name}"));
        }
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("shape mismatch: {}", diffs.join("; "))))
    }
}
