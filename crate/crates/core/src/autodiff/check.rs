//! Central finite differences, used as the independent gradient oracle.

use super::{GradMap, ParamSet, Tensor};
use crate::error::{FlowerError, Result};

/// Central-difference estimate `(L(θ+h) − L(θ−h)) / 2h` for every coordinate of
/// every parameter in `params`.
pub fn finite_diff_grad<F>(params: &ParamSet, step: f64, mut loss: F) -> Result<GradMap>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(FlowerError::Precondition(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = params.clone();
    let mut out = GradMap::new();
    let ids: Vec<String> = params.ids().map(str::to_string).collect();
    for id in ids {
        let base = params.get(&id).expect("id from same set").clone();
        let mut grad = Tensor::zeros(base.shape());
        for k in 0..base.len() {
            let orig = base.data()[k];
            probe.get_mut(&id).unwrap().data_mut()[k] = orig + step;
            let up = loss(&probe)?;
            probe.get_mut(&id).unwrap().data_mut()[k] = orig - step;
            let down = loss(&probe)?;
            probe.get_mut(&id).unwrap().data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(FlowerError::NonFinite(format!("loss probe at {id}[{k}]")));
            }
            grad.data_mut()[k] = (up - down) / (2.0 * step);
        }
        out.insert(id, grad);
    }
    Ok(out)
}

/// Scale floor of [`relative_error`]; below it the comparison is absolute.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Worst coordinate-wise relative error over the ids of `reference`.
/// Ids missing from `candidate` count as infinite error.
pub fn max_relative_error(candidate: &GradMap, reference: &GradMap) -> f64 {
    let mut worst: f64 = 0.0;
    for (id, r) in reference.iter() {
        let Some(c) = candidate.get(id) else { return f64::INFINITY };
        if c.shape() != r.shape() {
            return f64::INFINITY;
        }
        for (x, y) in c.data().iter().zip(r.data()) {
            worst = worst.max(relative_error(*x, *y));
        }
    }
    worst
}
