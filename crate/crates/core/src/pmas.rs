//! Importance-weighted parameter anchoring with a KL-to-uniform projection.
//!
//! Importance is the per-sample magnitude of `∂‖g(f(x))‖² / ∂θ`, averaged over
//! a task's data and combined across tasks by running average. Only the
//! feature extractor and the head are tracked; the transformation network is
//! never anchored.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, Partition, Tensor, Var};
use crate::error::{FlowerError, Result};
use crate::protonet::{kl_uniform_var, DistanceMode, PrototypeTable, ProtoNet};

const ANCHORED: [Partition; 2] = [Partition::FeatureExtractor, Partition::ClassifierHead];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    values: BTreeMap<String, Tensor>,
    tasks: usize,
}

impl ImportanceMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Importance fixed to `value` for every anchored parameter; `tasks = 1`.
    pub fn uniform(params: &ParamSet, value: f64) -> Self {
        let values = params
            .filtered(&ANCHORED)
            .iter()
            .map(|(id, p)| (id.to_string(), Tensor::full(p.value.shape(), value)))
            .collect();
        Self { values, tasks: 1 }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.values.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Importance of a single task.
    pub fn from_task(values: BTreeMap<String, Tensor>) -> Self {
        Self { values, tasks: 1 }
    }

    /// Same matrix divided by its largest entry, so every entry lies in `[0, 1]`.
    pub fn normalized(&self) -> Self {
        let max = self.values.values().flat_map(|t| t.data().iter().copied()).fold(0.0, f64::max);
        if max <= 0.0 {
            return self.clone();
        }
        let values = self.values.iter().map(|(k, t)| (k.clone(), t.map(|v| v / max))).collect();
        Self { values, tasks: self.tasks }
    }

    /// Running average of `self` (over its tasks) with one more task.
    pub fn merge(&self, task: &ImportanceMatrix) -> Result<Self> {
        let n = self.tasks as f64;
        let mut values = BTreeMap::new();
        for (id, t) in &task.values {
            let combined = match self.values.get(id) {
                Some(old) if old.shape() == t.shape() => {
                    let data = old.data().iter().zip(t.data()).map(|(o, v)| (n * o + v) / (n + 1.0)).collect();
                    Tensor::new(t.shape().to_vec(), data)?
                }
                Some(old) => {
                    return Err(FlowerError::ShapeMismatch {
                        node: id.clone(),
                        expected: old.shape().to_vec(),
                        got: t.shape().to_vec(),
                    })
                }
                None => t.clone(),
            };
            values.insert(id.clone(), combined);
        }
        Ok(Self { values, tasks: self.tasks + 1 })
    }
}

/// Mean over rows of `x` of `|∂‖embed(x)‖² / ∂θ|` for every anchored parameter.
pub fn task_importance(net: &ProtoNet, params: &ParamSet, x: &Tensor) -> Result<BTreeMap<String, Tensor>> {
    if x.rank() != 2 || x.rows() == 0 {
        return Err(FlowerError::Precondition("importance needs a non-empty batch".into()));
    }
    let anchored = params.filtered(&ANCHORED);
    let per_sample = (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::new();
            g.bind(params)?;
            let xi = g.constant(Tensor::matrix(1, x.cols(), x.row(i).to_vec())?);
            let z = net.embed_var(&mut g, xi)?;
            let sq = g.square(z);
            let l = g.sum(sq);
            g.gradients(l, &anchored)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = x.rows() as f64;
    let mut out = BTreeMap::new();
    for (id, p) in anchored.iter() {
        let mut acc = vec![0.0; p.value.len()];
        for gm in &per_sample {
            let g = gm.get(id).expect("gradient for every bound parameter");
            for (a, v) in acc.iter_mut().zip(g.data()) {
                *a += v.abs();
            }
        }
        out.insert(id.to_string(), Tensor::new(p.value.shape().to_vec(), acc.into_iter().map(|v| v / n).collect())?);
    }
    Ok(out)
}

/// Folds one task's importance into `xi` as a running average over tasks.
pub fn update_importance(xi: &ImportanceMatrix, net: &ProtoNet, params: &ParamSet, x: &Tensor) -> Result<ImportanceMatrix> {
    xi.merge(&ImportanceMatrix::from_task(task_importance(net, params, x)?))
}

/// Copy of the anchored parameters at the end of a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    params: ParamSet,
}

impl ParamSnapshot {
    pub fn params(&self) -> &ParamSet {
        &self.params
    }
}

pub fn take_snapshot(params: &ParamSet) -> ParamSnapshot {
    ParamSnapshot { params: params.filtered(&ANCHORED) }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PmasTerms {
    /// `λ3 · mean KL`
    pub projection: f64,
    /// `λ4 · Σ Ξ (θ − θ_old)²`
    pub anchoring: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PmasConfig {
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for PmasConfig {
    fn default() -> Self {
        Self { lambda3: 10.0, lambda4: 100.0 }
    }
}

/// `Σ_i Ξ_i (θ_i − θ_i^old)²` over the bound parameters present in the snapshot.
pub fn anchoring_var(g: &mut Graph, snapshot: &ParamSnapshot, xi: &ImportanceMatrix) -> Result<Var> {
    let mut total = g.constant(Tensor::scalar(0.0));
    for (id, old) in snapshot.params.iter() {
        let Some(weight) = xi.get(id) else { continue };
        let p = g.param(id)?;
        if g.shape(p) != old.value.shape() || weight.shape() != old.value.shape() {
            return Err(FlowerError::ShapeMismatch {
                node: id.to_string(),
                expected: old.value.shape().to_vec(),
                got: g.shape(p).to_vec(),
            });
        }
        let o = g.constant(old.value.clone());
        let diff = g.sub(p, o)?;
        let sq = g.square(diff);
        let w = g.constant(weight.clone());
        let weighted = g.mul(sq, w)?;
        let s = g.sum(weighted);
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Both penalty terms on the tape. `z` holds the embeddings of the session
/// batch and `protos` the prototypes of every class seen so far.
pub fn pmas_penalty_var(
    g: &mut Graph,
    z: Var,
    protos: Var,
    mode: DistanceMode,
    snapshot: Option<&ParamSnapshot>,
    xi: &ImportanceMatrix,
    cfg: PmasConfig,
) -> Result<(Var, Var, Var)> {
    let snapshot = snapshot.ok_or(FlowerError::MissingSnapshot)?;
    let kl = kl_uniform_var(g, z, protos, mode)?;
    let projection = g.scale(kl, cfg.lambda3);
    let quad = anchoring_var(g, snapshot, xi)?;
    let anchoring = g.scale(quad, cfg.lambda4);
    let total = g.add(projection, anchoring)?;
    Ok((total, projection, anchoring))
}

/// Value of the penalty for `params` on the rows of `x`.
pub fn pmas_penalty(
    net: &ProtoNet,
    params: &ParamSet,
    snapshot: Option<&ParamSnapshot>,
    xi: &ImportanceMatrix,
    x: &Tensor,
    prototypes: &PrototypeTable,
    cfg: PmasConfig,
) -> Result<PmasTerms> {
    let mut g = Graph::new();
    g.bind(params)?;
    let xv = g.constant(x.clone());
    let z = net.embed_var(&mut g, xv)?;
    let protos = g.constant(prototypes.matrix()?);
    let (total, projection, anchoring) = pmas_penalty_var(&mut g, z, protos, net.distance(), snapshot, xi, cfg)?;
    Ok(PmasTerms {
        projection: g.value(projection).item()?,
        anchoring: g.value(anchoring).item()?,
        total: g.value(total).item()?,
    })
}
