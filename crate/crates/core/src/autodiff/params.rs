use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{FlowerError, Result};

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    FeatureExtractor,
    ClassifierHead,
    Transformation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub partition: Partition,
    pub value: Tensor,
}

/// Named parameters, iterated in id order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, partition: Partition, value: Tensor) -> Result<()> {
        let id = id.into();
        if self.entries.contains_key(&id) {
            return Err(FlowerError::DuplicateParam(id));
        }
        self.entries.insert(id, Param { partition, value });
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.entries.get(id).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(id).map(|p| &mut p.value)
    }

    pub fn partition_of(&self, id: &str) -> Option<Partition> {
        self.entries.get(id).map(|p| p.partition)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Copy restricted to the given partitions.
    pub fn filtered(&self, keep: &[Partition]) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(_, p)| keep.contains(&p.partition))
                .map(|(k, p)| (k.clone(), p.clone()))
                .collect(),
        }
    }

    /// Overwrites values of `other`'s ids that also exist here.
    pub fn overwrite_from(&mut self, other: &ParamSet) -> Result<()> {
        for (id, p) in other.iter() {
            let dst = self
                .get_mut(id)
                .ok_or_else(|| FlowerError::UnknownParam(id.to_string()))?;
            if dst.shape() != p.value.shape() {
                return Err(FlowerError::ShapeMismatch {
                    node: id.to_string(),
                    expected: dst.shape().to_vec(),
                    got: p.value.shape().to_vec(),
                });
            }
            *dst = p.value.clone();
        }
        Ok(())
    }

    /// Returns `θ − lr·g`. Parameters without a gradient entry are left unchanged.
    pub fn sgd_step(&self, grads: &GradMap, lr: f64) -> Result<ParamSet> {
        let mut next = self.clone();
        next.apply_sgd(grads, lr)?;
        Ok(next)
    }

    /// In-place variant of [`ParamSet::sgd_step`].
    pub fn apply_sgd(&mut self, grads: &GradMap, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(FlowerError::Precondition(format!("learning rate must be positive, got {lr}")));
        }
        for (id, g) in grads.iter() {
            let Some(p) = self.entries.get_mut(id) else {
                return Err(FlowerError::UnknownParam(id.to_string()));
            };
            if p.value.shape() != g.shape() {
                return Err(FlowerError::ShapeMismatch {
                    node: id.to_string(),
                    expected: p.value.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            for (w, d) in p.value.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
        Ok(())
    }

    /// Hex SHA-256 over ids, shapes and the raw bits of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (id, p) in &self.entries {
            h.update(id.as_bytes());
            h.update([0u8]);
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.is_finite())
    }
}

/// Gradient per parameter id, same shapes as the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap {
    entries: BTreeMap<String, Tensor>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            entries: params
                .iter()
                .map(|(id, p)| (id.to_string(), Tensor::zeros(p.value.shape())))
                .collect(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, g: Tensor) {
        self.entries.insert(id.into(), g);
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.entries.get(id)
    }

    pub fn remove(&mut self, id: &str) -> Option<Tensor> {
        self.entries.remove(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries.values().map(Tensor::norm_sq).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.entries.values_mut() {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }

    /// Elementwise `self += other`; ids missing here are inserted.
    pub fn accumulate(&mut self, other: &GradMap) -> Result<()> {
        for (id, g) in other.iter() {
            match self.entries.get_mut(id) {
                Some(dst) => {
                    if dst.shape() != g.shape() {
                        return Err(FlowerError::ShapeMismatch {
                            node: id.to_string(),
                            expected: dst.shape().to_vec(),
                            got: g.shape().to_vec(),
                        });
                    }
                    for (a, b) in dst.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.entries.insert(id.to_string(), g.clone());
                }
            }
        }
        Ok(())
    }

    /// Arithmetic mean of several gradient maps.
    pub fn mean(maps: &[GradMap]) -> Result<GradMap> {
        let mut acc = GradMap::new();
        for m in maps {
            acc.accumulate(m)?;
        }
        if !maps.is_empty() {
            acc.scale(1.0 / maps.len() as f64);
        }
        Ok(acc)
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the pre-clip norm.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm_sq().sqrt();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }

    /// Drops every entry whose parameter is not in one of `keep`.
    pub fn retain_partitions(&mut self, params: &ParamSet, keep: &[Partition]) {
        self.entries
            .retain(|id, _| params.partition_of(id).is_some_and(|p| keep.contains(&p)));
    }
}
