use serde::{Deserialize, Serialize};

use super::scene::{Attribute, Scene, ATTRIBUTES, VALUES};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, RngState, Tensor};

/// L2 norm of every codebook row.
pub const CODEBOOK_NORM: f64 = 0.6;
/// L2 norm of every per-position feature row.
pub const POSITION_NORM: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub id: String,
    pub visible_attributes: Vec<Attribute>,
    pub seq_len: usize,
    pub feat_dim: usize,
    pub noise_sigma: f64,
    pub codebook_seed: u64,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("encoder {}: {m}", self.id)));
        if self.id.is_empty() || self.id.contains(['.', ' ']) {
            return err("id must be non-empty without dots or spaces".into());
        }
        if self.visible_attributes.is_empty() {
            return err("visible_attributes is empty".into());
        }
        let mut seen = self.visible_attributes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.visible_attributes.len() {
            return err("visible_attributes has duplicates".into());
        }
        if self.seq_len < self.visible_attributes.len() {
            return err(format!(
                "seq_len {} cannot hold {} visible attributes",
                self.seq_len,
                self.visible_attributes.len()
            ));
        }
        if self.feat_dim == 0 {
            return err("feat_dim must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return err(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        Ok(())
    }

    pub fn sees(&self, a: Attribute) -> bool {
        self.visible_attributes.contains(&a)
    }

    /// Visible attribute carried on feature row `r`. Rows cycle through the
    /// visible list so every row is informative.
    pub fn row_attribute(&self, r: usize) -> Attribute {
        self.visible_attributes[r % self.visible_attributes.len()]
    }
}

/// E1 sees color and shape, E2 count and position, E3 everything under noise.
pub fn desk_encoder_specs() -> Vec<EncoderSpec> {
    use Attribute::*;
    vec![
        EncoderSpec {
            id: "e1".into(),
            visible_attributes: vec![Color, Shape],
            seq_len: 9,
            feat_dim: 32,
            noise_sigma: 0.0,
            codebook_seed: 101,
        },
        EncoderSpec {
            id: "e2".into(),
            visible_attributes: vec![Count, Position],
            seq_len: 5,
            feat_dim: 48,
            noise_sigma: 0.0,
            codebook_seed: 102,
        },
        EncoderSpec {
            id: "e3".into(),
            visible_attributes: ATTRIBUTES.to_vec(),
            seq_len: 7,
            feat_dim: 24,
            noise_sigma: 0.5,
            codebook_seed: 103,
        },
    ]
}

fn random_rows(rows: usize, dim: usize, norm: f64, rng: &mut RngState) -> Tensor {
    let mut data = rng.normal_vec(rows * dim, 1.0);
    for r in data.chunks_mut(dim) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v *= norm / n);
    }
    Tensor::new(vec![rows, dim], data).expect("positive dims")
}

/// A frozen codebook encoder. The codebook has one row per (attribute, value)
/// pair; rows of invisible attributes exist but are never read.
#[derive(Debug, Clone, PartialEq)]
pub struct MockEncoder {
    pub spec: EncoderSpec,
    pub codebook: Tensor,
    pub positions: Tensor,
}

impl MockEncoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = RngState::new(spec.codebook_seed);
        let codebook = random_rows(ATTRIBUTES.len() * VALUES, spec.feat_dim, CODEBOOK_NORM, &mut rng);
        let positions = random_rows(spec.seq_len, spec.feat_dim, POSITION_NORM, &mut rng);
        Ok(Self {
            spec,
            codebook,
            positions,
        })
    }

    pub fn codebook_name(id: &str) -> String {
        format!("encoder.{id}.codebook")
    }

    pub fn positions_name(id: &str) -> String {
        format!("encoder.{id}.positions")
    }

    /// Insert codebook and position features as frozen parameters.
    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(&Self::codebook_name(&self.spec.id), self.codebook.clone(), false)?;
        store.insert(&Self::positions_name(&self.spec.id), self.positions.clone(), false)
    }

    /// Rebuild from tensors previously registered in `store`.
    pub fn from_store(spec: EncoderSpec, store: &ParamStore) -> Result<Self> {
        spec.validate()?;
        let fetch = |name: String, rows: usize| -> Result<Tensor> {
            let t = store
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))?;
            if t.shape() != [rows, spec.feat_dim] {
                return Err(Error::Checkpoint(format!("{name} has shape {:?}", t.shape())));
            }
            Ok(t.clone())
        };
        Ok(Self {
            codebook: fetch(Self::codebook_name(&spec.id), ATTRIBUTES.len() * VALUES)?,
            positions: fetch(Self::positions_name(&spec.id), spec.seq_len)?,
            spec,
        })
    }

    /// Noise-free features.
    pub fn base_signal(&self, scene: &Scene) -> Tensor {
        let d = self.spec.feat_dim;
        let mut out = self.positions.clone();
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            let a = self.spec.row_attribute(r);
            let code = self.codebook.row(a.index() * VALUES + scene.value(a));
            row.iter_mut().zip(code).for_each(|(o, c)| *o += c);
        }
        out
    }

    /// Features with i.i.d. Gaussian noise. Nothing is drawn when sigma is 0.
    pub fn encode(&self, scene: &Scene, rng: &mut RngState) -> Tensor {
        let mut out = self.base_signal(scene);
        if self.spec.noise_sigma > 0.0 {
            for v in out.data_mut() {
                *v += rng.normal() * self.spec.noise_sigma;
            }
        }
        out
    }
}

impl MockEncoder {
    /// Maximum-likelihood value of every visible attribute under the Gaussian
    /// noise model; `None` for attributes this encoder cannot see.
    pub fn decode_ml(&self, features: &Tensor) -> [Option<usize>; 4] {
        let d = self.spec.feat_dim;
        let mut out = [None; 4];
        for &a in &self.spec.visible_attributes {
            let mut best = (f64::INFINITY, 0);
            for v in 0..VALUES {
                let code = self.codebook.row(a.index() * VALUES + v);
                let mut dist = 0.0;
                for r in (0..self.spec.seq_len).filter(|&r| self.spec.row_attribute(r) == a) {
                    let x = &features.data()[r * d..(r + 1) * d];
                    let p = self.positions.row(r);
                    dist += (0..d).map(|j| (x[j] - p[j] - code[j]).powi(2)).sum::<f64>();
                }
                if dist < best.0 {
                    best = (dist, v);
                }
            }
            out[a.index()] = Some(best.1);
        }
        out
    }
}

pub fn mock_encode(scene: &Scene, spec: &EncoderSpec, rng: &mut RngState) -> Result<Tensor> {
    Ok(MockEncoder::new(spec.clone())?.encode(scene, rng))
}

/// Per-encoder features of one scene, in configured encoder order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub features: Vec<(String, Tensor)>,
    /// `drop_mask[k]` removes encoder `k` entirely.
    pub drop_mask: Vec<bool>,
    /// Per-row drops from token-level dropout, `token_mask[k][r]`.
    pub token_mask: Option<Vec<Vec<bool>>>,
}

impl FeatureBundle {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<(usize, &Tensor)> {
        self.features
            .iter()
            .position(|(e, _)| e == id)
            .map(|k| (k, &self.features[k].1))
    }

    /// Whether row `r` of encoder `k` is visible to the resampler.
    pub fn row_kept(&self, k: usize, r: usize) -> bool {
        !self.drop_mask[k] && self.token_mask.as_ref().map_or(true, |m| !m[k][r])
    }
}

/// Encoder `k` draws its noise from the stream derived from `(rng, k)`.
pub fn encode_all(scene: &Scene, encoders: &[MockEncoder], rng: &RngState) -> Result<FeatureBundle> {
    if encoders.is_empty() {
        return Err(Error::InvalidArgument("encode_all needs at least one encoder".into()));
    }
    let features = encoders
        .iter()
        .enumerate()
        .map(|(k, e)| (e.spec.id.clone(), e.encode(scene, &mut rng.derive(k as u64))))
        .collect();
    Ok(FeatureBundle {
        features,
        drop_mask: vec![false; encoders.len()],
        token_mask: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> Vec<MockEncoder> {
        desk_encoder_specs()
            .into_iter()
            .map(|s| MockEncoder::new(s).unwrap())
            .collect()
    }

    fn all_scenes() -> impl Iterator<Item = Scene> {
        (0..VALUES.pow(4)).map(|i| {
            Scene::from_values([i % 8, (i / 8) % 8, (i / 64) % 8, i / 512]).unwrap()
        })
    }

    #[test]
    fn blind_to_invisible_attributes() {
        for e in desk().into_iter().filter(|e| e.spec.noise_sigma == 0.0) {
            let mut rng = RngState::new(0);
            for s in all_scenes().step_by(37) {
                let base = e.encode(&s, &mut rng);
                for a in ATTRIBUTES {
                    for v in 0..VALUES {
                        let other = e.encode(&s.with_value(a, v), &mut rng);
                        if e.spec.sees(a) {
                            assert_eq!(other.bit_eq(&base), v == s.value(a));
                        } else {
                            assert!(other.bit_eq(&base));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn visible_values_have_distinct_means() {
        // With zero-mean noise the value-conditioned mean is the base signal
        // averaged over the other attributes, which differs only on the rows
        // carrying that attribute.
        for e in desk() {
            for &a in &e.spec.visible_attributes {
                let means: Vec<Tensor> = (0..VALUES)
                    .map(|v| e.base_signal(&Scene::from_values([0; 4]).unwrap().with_value(a, v)))
                    .collect();
                for i in 0..VALUES {
                    for j in i + 1..VALUES {
                        let mut d = means[i].clone();
                        d.data_mut()
                            .iter_mut()
                            .zip(means[j].data())
                            .for_each(|(x, y)| *x -= y);
                        assert!(d.l2_norm() > 0.1, "{} {a} {i} {j}", e.spec.id);
                    }
                }
            }
        }
    }

    #[test]
    fn noisy_encoding_is_seeded() {
        let spec = &desk_encoder_specs()[2];
        let s = Scene::new(1, 2, 3, 4).unwrap();
        let a = mock_encode(&s, spec, &mut RngState::new(9)).unwrap();
        let b = mock_encode(&s, spec, &mut RngState::new(9)).unwrap();
        let c = mock_encode(&s, spec, &mut RngState::new(10)).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn desk_bundle_shapes_and_order() {
        let enc = desk();
        let s = Scene::new(0, 1, 2, 3).unwrap();
        let b = encode_all(&s, &enc, &RngState::new(4)).unwrap();
        let shapes: Vec<_> = b.features.iter().map(|(_, t)| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![9, 32], vec![5, 48], vec![7, 24]]);
        let ids: Vec<_> = b.features.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["e1", "e2", "e3"]);
        assert_eq!(b.drop_mask, vec![false; 3]);
        let again = encode_all(&s, &enc, &RngState::new(4)).unwrap();
        assert_eq!(again, b);
        let single = encode_all(&s, &enc[..1], &RngState::new(4)).unwrap();
        assert!(single.features[0].1.bit_eq(&b.features[0].1));
        assert!(encode_all(&s, &[], &RngState::new(4)).is_err());
    }

    #[test]
    fn store_round_trip() {
        let enc = desk();
        let mut store = ParamStore::new();
        for e in &enc {
            e.register(&mut store).unwrap();
        }
        for e in &enc {
            let back = MockEncoder::from_store(e.spec.clone(), &store).unwrap();
            assert_eq!(&back, e);
            assert!(!store.is_trainable(&MockEncoder::codebook_name(&e.spec.id)));
        }
    }

    #[test]
    fn ml_decoder_is_exact_without_noise() {
        for e in desk() {
            for s in all_scenes().step_by(53) {
                let got = e.decode_ml(&e.base_signal(&s));
                for a in ATTRIBUTES {
                    assert_eq!(got[a.index()], e.spec.sees(a).then(|| s.value(a)));
                }
            }
        }
    }

    #[test]
    fn noisy_generalist_ceiling() {
        // Ideal per-attribute accuracy of the noisy desk encoder: well above
        // chance, well below the noise-free specialists.
        let e = &desk()[2];
        let scenes = crate::synth::generate_scenes(2000, &RngState::new(1)).unwrap();
        let mut rng = RngState::new(2);
        let mut hits = 0usize;
        for s in &scenes {
            let got = e.decode_ml(&e.encode(s, &mut rng));
            hits += ATTRIBUTES.iter().filter(|a| got[a.index()] == Some(s.value(**a))).count();
        }
        let acc = hits as f64 / (4 * scenes.len()) as f64;
        assert!((0.45..0.7).contains(&acc), "{acc}");
    }

    #[test]
    fn spec_validation() {
        let mut s = desk_encoder_specs()[0].clone();
        s.visible_attributes.clear();
        assert!(s.validate().is_err());
        let mut s = desk_encoder_specs()[2].clone();
        s.seq_len = 3;
        assert!(s.validate().is_err());
        let mut s = desk_encoder_specs()[2].clone();
        s.noise_sigma = -1.0;
        assert!(s.validate().is_err());
    }
}
