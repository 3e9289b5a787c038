//! Quick built-in checks run by `flower selftest`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::autodiff::{finite_diff_grad, max_relative_error, GradMap, Graph, ParamSet, Tensor};
use crate::ball::{ball_loss_var, draw_in_ball, fit_ball, SyntheticDraw, TransformModule};
use crate::data::LabeledBatch;
use crate::error::Result;
use crate::flat::{BaseLossConfig, BaseObjective, Objective};
use crate::pmas::{pmas_penalty_var, take_snapshot, ImportanceMatrix, ParamSnapshot, PmasConfig};
use crate::protonet::{ce_loss_var, kl_to_uniform, prototypes_var, DistanceMode, ModelConfig, PrototypeTable, ProtoNet};
use crate::session::{BallTerm, SessionObjective};
use crate::ClassId;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// A small network, a few-shot batch and PMAS state, all drawn from `seed`.
pub struct GradFixture {
    pub net: ProtoNet,
    pub transform: TransformModule,
    pub params: ParamSet,
    /// Two new classes with three samples each.
    pub batch: LabeledBatch,
    /// Two earlier classes.
    pub old: PrototypeTable,
    pub snapshot: ParamSnapshot,
    pub importance: ImportanceMatrix,
    pub draw: SyntheticDraw,
}

fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

impl GradFixture {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig { input_dim: 4, hidden: vec![6, 6], embedding_dim: 4, distance: DistanceMode::Euclidean };
        let net = ProtoNet::new(cfg)?;
        let transform = TransformModule::new();
        let mut params = net.init_params(&mut rng)?;
        transform.init_params(4, &[5, 5], &mut params, &mut rng)?;
        // the last transform layer starts at zero; give it weight so every gradient is exercised
        for id in ["transform.2.weight", "transform.2.bias"] {
            let shape = params.get(id).expect("transform layer").shape().to_vec();
            *params.get_mut(id).unwrap() = gaussian_tensor(&mut rng, &shape, 0.3);
        }
        // zero biases put pre-activations exactly on the ReLU kink whenever a
        // whole layer is dead for a sample
        for (id, p) in params.iter_mut() {
            if id.ends_with(".bias") {
                let shape = p.value.shape().to_vec();
                p.value = gaussian_tensor(&mut rng, &shape, 0.1);
            }
        }
        let labels = [2, 2, 2, 3, 3, 3].map(ClassId).to_vec();
        let batch = LabeledBatch::new(gaussian_tensor(&mut rng, &[6, 4], 1.0), labels)?;
        let mut old = PrototypeTable::new(4);
        for c in 0..2 {
            old.insert(ClassId(c), gaussian_tensor(&mut rng, &[4], 1.0).data().to_vec())?;
        }
        let mut moved = params.clone();
        for (_, p) in moved.iter_mut() {
            for w in p.value.data_mut() {
                *w += rng.random_range(-0.05..0.05);
            }
        }
        let snapshot = take_snapshot(&moved);
        let values = params
            .iter()
            .filter(|(id, _)| !id.starts_with("transform"))
            .map(|(id, p)| {
                let t = Tensor::new(p.value.shape().to_vec(), (0..p.value.len()).map(|_| rng.random_range(0.0..1.0)).collect())
                    .expect("shape and data agree");
                (id.to_string(), t)
            })
            .collect();
        let importance = ImportanceMatrix::from_task(values);
        let draw = SyntheticDraw::sample(2, 4, 4, &mut rng)?.expect("non-empty draw");
        Ok(Self { net, transform, params, batch, old, snapshot, importance, draw })
    }

    fn targets(&self) -> Vec<usize> {
        let classes = self.batch.classes();
        self.batch.labels.iter().map(|c| classes.binary_search(c).expect("batch class")).collect()
    }

    pub fn ce(&self, params: &ParamSet) -> Result<(f64, GradMap)> {
        let mut g = Graph::new();
        g.bind(params)?;
        let x = g.constant(self.batch.x.clone());
        let z = self.net.embed_var(&mut g, x)?;
        let (protos, _) = prototypes_var(&mut g, z, &self.batch.labels)?;
        let loss = ce_loss_var(&mut g, z, protos, &self.targets(), self.net.distance())?;
        Ok((g.value(loss).item()?, g.gradients(loss, params)?))
    }

    /// Base objective evaluated away from its reference point.
    pub fn base_objective(&self) -> Result<BaseObjective<'_>> {
        BaseObjective::new(&self.net, self.snapshot.params(), &self.batch, BaseLossConfig { lambda1: 1.0, kl: true })
    }

    pub fn ball(&self, params: &ParamSet) -> Result<(f64, GradMap)> {
        let mut g = Graph::new();
        g.bind(params)?;
        let raw = g.constant(self.draw.offsets.clone());
        let z = self.transform.forward_var(&mut g, raw)?;
        let centers = g.constant(self.old.matrix()?);
        let own: Vec<usize> = self.draw.class_pos.clone();
        let loss = ball_loss_var(&mut g, z, centers, &own, 1.0, 1.0)?;
        Ok((g.value(loss).item()?, g.gradients(loss, params)?))
    }

    /// `which = 0` keeps the projection term, `1` the anchoring term.
    pub fn pmas_term(&self, params: &ParamSet, which: usize) -> Result<(f64, GradMap)> {
        let cfg = if which == 0 { PmasConfig { lambda3: 10.0, lambda4: 0.0 } } else { PmasConfig { lambda3: 0.0, lambda4: 100.0 } };
        let mut g = Graph::new();
        g.bind(params)?;
        let x = g.constant(self.batch.x.clone());
        let z = self.net.embed_var(&mut g, x)?;
        let protos = g.constant(self.old.matrix()?);
        let (_, proj, anch) = pmas_penalty_var(&mut g, z, protos, self.net.distance(), Some(&self.snapshot), &self.importance, cfg)?;
        let loss = if which == 0 { proj } else { anch };
        Ok((g.value(loss).item()?, g.gradients(loss, params)?))
    }

    pub fn joint_objective(&self) -> Result<SessionObjective<'_>> {
        let ball = BallTerm::fit(&self.net, &self.params, &self.batch, &self.old, self.draw.clone(), 1.0, 1.0)?;
        Ok(SessionObjective {
            net: &self.net,
            transform: &self.transform,
            data: &self.batch,
            old: &self.old,
            ball: Some(ball),
            pmas: Some((&self.snapshot, &self.importance, PmasConfig::default())),
        })
    }
}

/// Worst relative error between the tape gradient of `f` and central differences.
pub fn gradient_error<F>(params: &ParamSet, f: F) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<(f64, GradMap)>,
{
    let (_, analytic) = f(params)?;
    let numeric = finite_diff_grad(params, FD_STEP, |p| Ok(f(p)?.0))?;
    Ok(max_relative_error(&analytic, &numeric))
}

pub const GRADIENT_TERMS: [&str; 6] = ["ce", "base", "ball", "pmas-projection", "pmas-anchoring", "joint"];

/// Gradient error of the named term on the fixture for `seed`.
pub fn term_gradient_error(term: &str, seed: u64) -> Result<f64> {
    let fx = GradFixture::new(seed)?;
    let p = &fx.params;
    match term {
        "ce" => gradient_error(p, |q| fx.ce(q)),
        "base" => {
            let obj = fx.base_objective()?;
            gradient_error(p, |q| obj.loss_grad(q))
        }
        "ball" => gradient_error(p, |q| fx.ball(q)),
        "pmas-projection" => gradient_error(p, |q| fx.pmas_term(q, 0)),
        "pmas-anchoring" => gradient_error(p, |q| fx.pmas_term(q, 1)),
        "joint" => {
            let obj = fx.joint_objective()?;
            gradient_error(p, |q| obj.loss_grad(q))
        }
        other => Err(crate::FlowerError::Precondition(format!("unknown loss term `{other}`"))),
    }
}

/// Largest gap between the empirical CDF of in-ball radii and `(r/σ)^D`.
pub fn radius_cdf_deviation(dim: usize, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = 2.5;
    let mut a = vec![0.0; dim];
    a[0] = sigma;
    let b: Vec<f64> = a.iter().map(|v| -v).collect();
    let ball = fit_ball(ClassId(0), &[&a, &b])?;
    let mut radii = Vec::with_capacity(samples);
    for _ in 0..samples {
        let p = draw_in_ball(&ball, &mut rng)?;
        radii.push(p.iter().zip(&ball.center).map(|(x, c)| (x - c).powi(2)).sum::<f64>().sqrt());
    }
    radii.sort_by(f64::total_cmp);
    let n = samples as f64;
    let mut worst: f64 = 0.0;
    for (i, r) in radii.iter().enumerate() {
        let f = (r / sigma).powi(dim as i32);
        worst = worst.max((f - i as f64 / n).abs()).max((f - (i + 1) as f64 / n).abs());
    }
    let max_excess = radii.last().map_or(0.0, |r| r - sigma);
    Ok((worst, max_excess))
}

/// Worst bound violation of KL-to-uniform over random probability vectors.
pub fn kl_bound_violation(vectors: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..vectors {
        let m = rng.random_range(2..=20);
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let kl = kl_to_uniform(&p)?;
        worst = worst.max(-kl).max(kl - (m as f64).ln());
    }
    Ok(worst)
}

pub fn run_selftest(seeds: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut push = |name: String, r: Result<(bool, String)>| {
        let (passed, detail) = r.unwrap_or_else(|e| (false, e.to_string()));
        out.push(CheckOutcome { name, passed, detail });
    };
    for term in GRADIENT_TERMS {
        push(
            format!("gradient {term}"),
            (0..seeds)
                .map(|s| term_gradient_error(term, s))
                .collect::<Result<Vec<_>>>()
                .map(|errs| {
                    let worst = errs.iter().cloned().fold(0.0, f64::max);
                    (worst < GRAD_TOLERANCE, format!("max rel err {worst:.2e} over {seeds} seeds"))
                }),
        );
    }
    for dim in [2, 8, 32] {
        push(
            format!("ball radius law D={dim}"),
            radius_cdf_deviation(dim, 100_000, dim as u64).map(|(dev, excess)| {
                (dev < 0.01 && excess <= 1e-12, format!("cdf deviation {dev:.4}, radius excess {excess:.1e}"))
            }),
        );
    }
    push(
        "kl to uniform bounds".into(),
        kl_bound_violation(10_000, 0).map(|v| (v <= 1e-12, format!("worst violation {v:.1e}"))),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_passes() {
        for c in run_selftest(3) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn fixture_is_small() {
        let fx = GradFixture::new(0).unwrap();
        assert!(fx.params.numel() <= 500, "{}", fx.params.numel());
    }
}
