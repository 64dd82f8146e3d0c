use std::ops::Range;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::config::{DropoutMode, FusionConfig};
use crate::error::{Error, Result};
use crate::nn::linear;
use crate::numerics::{AttentionMask, BatchMask, Graph, ParamStore, RngState, Tensor, Var};
use crate::synth::FeatureBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Eval,
}

/// How dropped encoders are kept out of cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvLayout {
    /// All rows present, dropped ones excluded by the key mask.
    Masked,
    /// Dropped encoders' rows physically removed. Every sample in the batch
    /// must share one encoder drop pattern and have no token drops.
    Compact,
}

/// Keep flags for `k` encoders, each dropped with probability `p`. If every
/// encoder would drop, all are kept; the second value reports that fallback.
pub fn draw_encoder_keep(k: usize, p: f64, rng: &mut RngState) -> (Vec<bool>, bool) {
    let keep: Vec<bool> = (0..k).map(|_| !rng.bernoulli(p)).collect();
    if keep.iter().any(|&x| x) {
        (keep, false)
    } else {
        (vec![true; k], true)
    }
}

/// Training-time encoder dropout. In eval phase the bundle is returned as is.
pub fn encoder_dropout(
    bundle: &FeatureBundle,
    p: f64,
    mode: DropoutMode,
    rng: &mut RngState,
    phase: Phase,
) -> FeatureBundle {
    let mut out = bundle.clone();
    if phase == Phase::Eval || p == 0.0 {
        return out;
    }
    match mode {
        DropoutMode::Encoder => {
            let (keep, _) = draw_encoder_keep(bundle.len(), p, rng);
            out.drop_mask = keep.iter().map(|&k| !k).collect();
        }
        DropoutMode::Token => {
            let mut mask: Vec<Vec<bool>> = bundle
                .features
                .iter()
                .map(|(_, t)| (0..t.rows()).map(|_| rng.bernoulli(p)).collect())
                .collect();
            if mask.iter().flatten().all(|&d| d) {
                mask.iter_mut().for_each(|m| m.fill(false));
            }
            out.token_mask = Some(mask);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub rows: Range<usize>,
}

/// Projected, concatenated features of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatenatedKV {
    pub matrix: Tensor,
    pub segments: Vec<Segment>,
}

/// Projected keys/values for a batch, stacked as `[batch * tk, d_proj]`.
#[derive(Debug, Clone)]
pub struct KvBatch {
    pub kv: Var,
    pub tk: usize,
    pub batch: usize,
    /// `key_keep[b][j]`: key row `j` is visible to sample `b`. `None` when
    /// nothing is hidden.
    pub key_keep: Option<Vec<Vec<bool>>>,
    /// Segments in configured encoder order. Under the compact layout only
    /// kept encoders appear.
    pub segments: Vec<Segment>,
    /// `keep[b][k]`: encoder `k` (config order) is visible to sample `b`.
    pub keep: Vec<Vec<bool>>,
}

pub fn proj_name(prefix: &str, id: &str) -> String {
    format!("{prefix}.proj.{id}")
}

fn lookup<'a>(cfg: &FusionConfig, bundle: &'a FeatureBundle, k: usize) -> Result<(usize, &'a Tensor)> {
    let id = &cfg.encoder_ids[k];
    let (bk, t) = bundle
        .get(id)
        .ok_or_else(|| Error::Config(format!("feature bundle has no encoder {id:?}")))?;
    let want = [cfg.seq_lens[k], cfg.feat_dims[k]];
    if t.shape() != want {
        return Err(Error::Config(format!(
            "encoder {id}: features {:?} but config expects {want:?}",
            t.shape()
        )));
    }
    Ok((bk, t))
}

/// Project each configured encoder's features to `d_proj` and concatenate
/// them per sample.
pub fn project_batch(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &FusionConfig,
    prefix: &str,
    bundles: &[FeatureBundle],
    layout: KvLayout,
) -> Result<KvBatch> {
    if bundles.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let batch = bundles.len();
    let k = cfg.k();
    let mut keep = vec![vec![true; k]; batch];
    let mut any_row_drop = false;
    for (b, bundle) in bundles.iter().enumerate() {
        for e in 0..k {
            let (bk, _) = lookup(cfg, bundle, e)?;
            keep[b][e] = !bundle.drop_mask[bk];
            any_row_drop |= (0..cfg.seq_lens[e]).any(|r| !bundle.row_kept(bk, r));
        }
        if !keep[b].iter().any(|&x| x) {
            return Err(Error::InvalidArgument(format!(
                "sample {b} has every encoder dropped"
            )));
        }
    }

    let included: Vec<usize> = match layout {
        KvLayout::Masked => (0..k).collect(),
        KvLayout::Compact => {
            let token_drops = bundles.iter().any(|b| b.token_mask.is_some());
            if token_drops || keep.iter().any(|kb| kb != &keep[0]) {
                return Err(Error::InvalidArgument(
                    "compact layout needs one shared encoder drop pattern".into(),
                ));
            }
            (0..k).filter(|&e| keep[0][e]).collect()
        }
    };

    let mut parts = Vec::with_capacity(included.len());
    let mut rows = Vec::with_capacity(included.len());
    let mut segments = Vec::with_capacity(included.len());
    let mut start = 0;
    for &e in &included {
        let l = cfg.seq_lens[e];
        let mut data = Vec::with_capacity(batch * l * cfg.feat_dims[e]);
        for bundle in bundles {
            data.extend_from_slice(lookup(cfg, bundle, e)?.1.data());
        }
        let x = g.constant(Tensor::new(vec![batch * l, cfg.feat_dims[e]], data)?);
        parts.push(linear(g, store, &proj_name(prefix, &cfg.encoder_ids[e]), x, None)?);
        rows.push(l);
        segments.push(Segment {
            id: cfg.encoder_ids[e].clone(),
            rows: start..start + l,
        });
        start += l;
    }
    let tk = start;
    let kv = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_blocks(&parts, &rows, batch)?
    };

    let needs_mask = layout == KvLayout::Masked && (any_row_drop || keep.iter().flatten().any(|&x| !x));
    let key_keep = if needs_mask {
        let mut all = Vec::with_capacity(batch);
        for (b, bundle) in bundles.iter().enumerate() {
            let mut keys = Vec::with_capacity(tk);
            for &e in &included {
                let (bk, _) = lookup(cfg, bundle, e)?;
                keys.extend((0..cfg.seq_lens[e]).map(|r| bundle.row_kept(bk, r)));
            }
            if !keys.iter().any(|&x| x) {
                return Err(Error::InvalidArgument(format!("sample {b} has no visible feature rows")));
            }
            all.push(keys);
        }
        Some(all)
    } else {
        None
    };
    Ok(KvBatch {
        kv,
        tk,
        batch,
        key_keep,
        segments,
        keep,
    })
}

impl KvBatch {
    /// Cross-attention mask for `tq` query rows per sample, if any key is hidden.
    pub fn mask(&self, tq: usize) -> Option<Rc<BatchMask>> {
        self.key_keep.as_ref().map(|keys| {
            Rc::new(BatchMask::per_sample(
                keys.iter().map(|k| AttentionMask::from_keys(tq, k)).collect(),
            ))
        })
    }
}

/// Single-sample projection with dropped encoders physically removed.
pub fn project_and_concat(
    bundle: &FeatureBundle,
    store: &ParamStore,
    cfg: &FusionConfig,
    prefix: &str,
) -> Result<ConcatenatedKV> {
    let mut g = Graph::new();
    let kv = project_batch(&mut g, store, cfg, prefix, std::slice::from_ref(bundle), KvLayout::Compact)?;
    Ok(ConcatenatedKV {
        matrix: g.value(kv.kv).clone(),
        segments: kv.segments,
    })
}
