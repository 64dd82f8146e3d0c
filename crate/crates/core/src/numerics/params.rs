use std::collections::BTreeMap;

use super::rng::RngState;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Param {
    value: Tensor,
    trainable: bool,
}

/// Named parameters with per-tensor trainable flags.
///
/// Names are hierarchical (`fusion.layers.0.self_attn.q.w`) and iterate in
/// lexicographic order, which fixes the checkpoint layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.params
            .insert(name.to_string(), Param { value, trainable });
        Ok(())
    }

    /// Scaled-normal matrix `[fan_in × fan_out]` with std `1/sqrt(fan_in)`.
    pub fn init_linear(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngState,
    ) -> Result<()> {
        let w = rng.normal_vec(fan_in * fan_out, 1.0 / (fan_in as f64).sqrt());
        self.insert(
            &format!("{prefix}.w"),
            Tensor::new(vec![fan_in, fan_out], w)?,
            true,
        )?;
        self.insert(&format!("{prefix}.b"), Tensor::zeros(&[fan_out]), true)
    }

    pub fn init_layer_norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.insert(&format!("{prefix}.gamma"), Tensor::full(&[d], 1.0), true)?;
        self.insert(&format!("{prefix}.beta"), Tensor::zeros(&[d]), true)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    /// Set the flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.params
            .iter()
            .map(|(n, p)| (n.as_str(), &p.value, p.trainable))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Bitwise equality of every parameter under `prefix`.
    pub fn prefix_bit_eq(&self, other: &ParamStore, prefix: &str) -> bool {
        let a: Vec<_> = self.iter().filter(|(n, ..)| n.starts_with(prefix)).collect();
        let b: Vec<_> = other.iter().filter(|(n, ..)| n.starts_with(prefix)).collect();
        a.len() == b.len()
            && a
                .iter()
                .zip(&b)
                .all(|((na, ta, _), (nb, tb, _))| na == nb && ta.bit_eq(tb))
    }

    /// Copy values (not flags) for every name in `other` that also exists here.
    pub fn load_values_from(&mut self, other: &ParamStore, rename: impl Fn(&str) -> String) -> Result<usize> {
        let mut n = 0;
        for (name, value, _) in other.iter() {
            let target = rename(name);
            if let Some(p) = self.params.get_mut(&target) {
                if p.value.shape() != value.shape() {
                    return Err(Error::Dimension {
                        op: "load parameter",
                        lhs: p.value.shape().to_vec(),
                        rhs: value.shape().to_vec(),
                    });
                }
                p.value = value.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|n, _| !n.starts_with(prefix));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn counts_respect_flags() {
        let mut s = ParamStore::new();
        s.insert("x.w", Tensor::zeros(&[2, 3]), true).unwrap();
        s.insert("y.w", Tensor::zeros(&[4]), false).unwrap();
        assert_eq!(s.numel(), 10);
        assert_eq!(s.trainable_numel(), 6);
        assert_eq!(s.set_trainable_prefix("y", true), 1);
        assert_eq!(s.trainable_numel(), 10);
    }
}
