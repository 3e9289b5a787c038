use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::LabeledBatch;
use crate::error::{FlowerError, Result};
use crate::protonet::{nearest_class, ProtoNet};
use crate::session::{ContinualState, Method};
use crate::ClassId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub method: Method,
    pub seed: u64,
    /// 1 for the base task.
    pub session: usize,
    #[serde(serialize_with = "super::report::ser_fixed6")]
    pub accuracy: f64,
    pub seen_classes: usize,
    pub test_samples: usize,
    #[serde(serialize_with = "super::report::ser_fixed6_map")]
    pub per_class: BTreeMap<ClassId, f64>,
    /// Kept out of serialized results so repeated runs produce identical files.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Nearest-prototype accuracy on the test samples of every seen class.
pub fn evaluate(net: &ProtoNet, state: &ContinualState, test: &LabeledBatch, method: Method, seed: u64) -> Result<SessionResult> {
    if state.prototypes.is_empty() {
        return Err(FlowerError::Precondition("no prototypes to evaluate against".into()));
    }
    let seen = state.prototypes.classes();
    let Some(pool) = test.restrict(&seen)? else {
        return Err(FlowerError::Precondition("the test pool has no samples of any seen class".into()));
    };
    let emb = net.embed(&state.params, &pool.x)?;
    let mut hits: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    for (i, y) in pool.labels.iter().enumerate() {
        let pred = nearest_class(&state.prototypes, emb.row(i), net.distance())?;
        let e = hits.entry(*y).or_default();
        e.0 += (pred == *y) as usize;
        e.1 += 1;
    }
    let correct: usize = hits.values().map(|h| h.0).sum();
    Ok(SessionResult {
        method,
        seed,
        session: state.session,
        accuracy: correct as f64 / pool.len() as f64,
        seen_classes: seen.len(),
        test_samples: pool.len(),
        per_class: hits.into_iter().map(|(c, (h, n))| (c, h as f64 / n as f64)).collect(),
        wall_time_s: 0.0,
    })
}
