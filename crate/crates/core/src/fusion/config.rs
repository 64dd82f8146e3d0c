use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, LayerConfig};
use crate::synth::{EncoderSpec, VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CrossAttnCadence {
    #[default]
    EveryLayer,
    /// Cross-attention on even layers only.
    Alternating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutMode {
    /// Whole encoders are dropped per example.
    #[default]
    Encoder,
    /// Individual feature rows are dropped per example.
    Token,
}

/// Every architecture symbol of one resampler. The total query count is
/// derived as `queries_per_encoder * K` and never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub encoder_ids: Vec<String>,
    pub feat_dims: Vec<usize>,
    pub seq_lens: Vec<usize>,
    pub d_proj: usize,
    pub queries_per_encoder: usize,
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub d_lm: usize,
    pub dropout_p: f64,
    #[serde(default)]
    pub dropout_mode: DropoutMode,
    #[serde(default)]
    pub cross_attn_cadence: CrossAttnCadence,
    /// Text rows receive the cross-attention update too.
    pub text_cross_attends: bool,
    /// Text prompt is part of the resampler input.
    pub text_input: bool,
    /// Depth of the output map to the LM width, 1 or 2.
    pub fc_layers: usize,
    pub max_text_len: usize,
}

impl FusionConfig {
    /// Desk defaults for the given encoders.
    pub fn for_encoders(specs: &[EncoderSpec], d_lm: usize) -> Self {
        Self {
            encoder_ids: specs.iter().map(|s| s.id.clone()).collect(),
            feat_dims: specs.iter().map(|s| s.feat_dim).collect(),
            seq_lens: specs.iter().map(|s| s.seq_len).collect(),
            d_proj: 64,
            queries_per_encoder: 8,
            d_h: 32,
            layers: 2,
            heads: 4,
            ffn_hidden: 64,
            d_lm,
            dropout_p: 0.2,
            dropout_mode: DropoutMode::Encoder,
            cross_attn_cadence: CrossAttnCadence::EveryLayer,
            text_cross_attends: true,
            text_input: true,
            fc_layers: 1,
            max_text_len: 8,
        }
    }

    /// Same hyperparameters restricted to one encoder.
    pub fn single(&self, id: &str) -> Result<Self> {
        let k = self.encoder_index(id)?;
        let mut c = self.clone();
        c.encoder_ids = vec![self.encoder_ids[k].clone()];
        c.feat_dims = vec![self.feat_dims[k]];
        c.seq_lens = vec![self.seq_lens[k]];
        // One encoder has nothing to drop.
        c.dropout_p = 0.0;
        Ok(c)
    }

    pub fn k(&self) -> usize {
        self.encoder_ids.len()
    }

    pub fn num_queries(&self) -> usize {
        self.queries_per_encoder * self.k()
    }

    pub fn total_kv_len(&self) -> usize {
        self.seq_lens.iter().sum()
    }

    pub fn encoder_index(&self, id: &str) -> Result<usize> {
        self.encoder_ids
            .iter()
            .position(|e| e == id)
            .ok_or_else(|| Error::Config(format!("encoder {id:?} not in fusion config")))
    }

    pub fn has_cross(&self, layer: usize) -> bool {
        match self.cross_attn_cadence {
            CrossAttnCadence::EveryLayer => true,
            CrossAttnCadence::Alternating => layer % 2 == 0,
        }
    }

    pub fn layer_config(&self, layer: usize) -> Result<LayerConfig> {
        Ok(LayerConfig {
            attn: AttentionConfig::new(self.d_h, self.heads)?,
            ffn_hidden: self.ffn_hidden,
            kv_dim: self.has_cross(layer).then_some(self.d_proj),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let k = self.k();
        if k == 0 {
            return err("fusion needs at least one encoder".into());
        }
        if self.feat_dims.len() != k || self.seq_lens.len() != k {
            return err(format!(
                "encoder_ids, feat_dims and seq_lens lengths differ: {k}, {}, {}",
                self.feat_dims.len(),
                self.seq_lens.len()
            ));
        }
        let mut ids = self.encoder_ids.clone();
        ids.sort();
        ids.dedup();
        if ids.len() != k {
            return err("duplicate encoder ids".into());
        }
        let dims = [
            ("d_proj", self.d_proj),
            ("queries_per_encoder", self.queries_per_encoder),
            ("d_h", self.d_h),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("d_lm", self.d_lm),
            ("max_text_len", self.max_text_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.feat_dims.iter().chain(&self.seq_lens).any(|&v| v == 0) {
            return err("encoder dims and lengths must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return err(format!("dropout_p {} outside [0, 1]", self.dropout_p));
        }
        if !matches!(self.fc_layers, 1 | 2) {
            return err(format!("fc_layers must be 1 or 2, got {}", self.fc_layers));
        }
        AttentionConfig::new(self.d_h, self.heads)?;
        Ok(())
    }

    /// Closed-form parameter count of a resampler built from this config.
    pub fn expected_param_count(&self) -> usize {
        let lin = |i: usize, o: usize| i * o + o;
        let (h, f) = (self.d_h, self.ffn_hidden);
        let mut n: usize = self.feat_dims.iter().map(|&d| lin(d, self.d_proj)).sum();
        n += self.num_queries() * h;
        if self.text_input {
            n += (VOCAB_SIZE + self.max_text_len) * h;
        }
        for l in 0..self.layers {
            n += 2 * h + 4 * lin(h, h) + 2 * h + lin(h, f) + lin(f, h);
            if self.has_cross(l) {
                n += 2 * h + 2 * lin(h, h) + 2 * lin(self.d_proj, h);
            }
        }
        n += 2 * h;
        n += match self.fc_layers {
            1 => lin(h, self.d_lm),
            _ => lin(h, h) + lin(h, self.d_lm),
        };
        n
    }
}

/// Input-to-output feature size ratio `(ΣL_k · d_proj) / (Q · d_h)`.
pub fn compression_ratio(cfg: &FusionConfig) -> f64 {
    (cfg.total_kv_len() * cfg.d_proj) as f64 / (cfg.num_queries() * cfg.d_h) as f64
}

/// Large-scale reference geometry: five ViT encoders whose token counts sum
/// to 1223, projected to 1408, 32 queries each at hidden size 768. Only
/// shapes are meaningful here; the per-encoder split is one consistent with
/// 224px inputs at patch 14 (257 tokens with class token) and patch 16.
pub fn reference_config() -> FusionConfig {
    FusionConfig {
        encoder_ids: ["eva", "clip", "silc", "vite", "dino"].map(String::from).to_vec(),
        feat_dims: vec![1408, 1024, 1536, 1792, 1024],
        seq_lens: vec![257, 257, 196, 256, 257],
        d_proj: 1408,
        queries_per_encoder: 32,
        d_h: 768,
        layers: 12,
        heads: 12,
        ffn_hidden: 3072,
        d_lm: 2048,
        dropout_p: 0.2,
        dropout_mode: DropoutMode::Encoder,
        cross_attn_cadence: CrossAttnCadence::EveryLayer,
        text_cross_attends: true,
        text_input: true,
        fc_layers: 1,
        max_text_len: 32,
    }
}
