//! Base-phase training under bounded weight noise.
//!
//! Each update draws `trials` noise vectors, evaluates the loss and gradient
//! at every perturbed point, restores the weights and steps along the mean
//! gradient. The final feature-extractor weights anchor the clamp box used by
//! later sessions.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Graph, ParamSet, Partition, Tensor, Var};
use crate::data::LabeledBatch;
use crate::error::{FlowerError, Result};
use crate::protonet::{ce_loss_var, kl_uniform_var, prototypes_var, ProtoNet};
use crate::rng::{substream, Module};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    #[default]
    Uniform,
    DiscreteBeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub bound: f64,
    pub mode: NoiseMode,
    /// Number of trailing feature-extractor layers whose weights are perturbed.
    pub target_layers: usize,
    pub trials: usize,
    pub beta_low: Option<f64>,
    pub beta_high: Option<f64>,
    pub reduction_factor: Option<f64>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            bound: 0.01,
            mode: NoiseMode::Uniform,
            target_layers: 2,
            trials: 2,
            beta_low: None,
            beta_high: None,
            reduction_factor: None,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(FlowerError::Precondition(format!("noise bound must be positive, got {}", self.bound)));
        }
        if self.trials == 0 {
            return Err(FlowerError::Precondition("at least one noise trial is required".into()));
        }
        if self.mode == NoiseMode::DiscreteBeta {
            return Err(FlowerError::Config(
                "noise mode `discrete-beta` has no defined sampling rule; use `uniform`".into(),
            ));
        }
        Ok(())
    }
}

pub type NoiseMap = BTreeMap<String, Tensor>;

/// One noise tensor per id in `targets`, entries uniform on `[-bound, bound]`.
pub fn sample_noise<R: Rng + ?Sized>(
    spec: &NoiseSpec,
    params: &ParamSet,
    targets: &[String],
    rng: &mut R,
) -> Result<NoiseMap> {
    spec.validate()?;
    let b = spec.bound;
    let mut out = NoiseMap::new();
    for id in targets {
        let p = params.get(id).ok_or_else(|| FlowerError::UnknownParam(id.clone()))?;
        let data = (0..p.len()).map(|_| rng.random_range(-b..=b)).collect();
        out.insert(id.clone(), Tensor::new(p.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// Anchor of the feature extractor plus the half-width of the clamp box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatWideRegion {
    pub anchor: ParamSet,
    pub bound: f64,
}

impl FlatWideRegion {
    pub fn new(params: &ParamSet, bound: f64) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(FlowerError::Precondition(format!("region bound must be positive, got {bound}")));
        }
        Ok(Self { anchor: params.filtered(&[Partition::FeatureExtractor]), bound })
    }

    /// Largest `|w - anchor|` over the feature extractor of `params`.
    pub fn max_deviation(&self, params: &ParamSet) -> f64 {
        let mut worst: f64 = 0.0;
        for (id, a) in self.anchor.iter() {
            if let Some(p) = params.get(id) {
                for (x, y) in p.data().iter().zip(a.value.data()) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Decay {
    #[default]
    Constant,
    /// `initial / (k + 1)^power`
    Power { power: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaEvent {
    pub epoch: usize,
    pub factor: f64,
}

/// Learning rate `λ_k` as a function of the update index and epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub decay: Decay,
    #[serde(default)]
    pub gammas: Vec<GammaEvent>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { initial: lr, decay: Decay::Constant, gammas: Vec::new() }
    }

    pub fn power(initial: f64, power: f64) -> Self {
        Self { initial, decay: Decay::Power { power }, gammas: Vec::new() }
    }

    pub fn with_gamma(mut self, epoch: usize, factor: f64) -> Self {
        self.gammas.push(GammaEvent { epoch, factor });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(FlowerError::Precondition("initial learning rate must be positive".into()));
        }
        if let Decay::Power { power } = self.decay {
            if !(power >= 0.0 && power.is_finite()) {
                return Err(FlowerError::Precondition("decay power must be non-negative".into()));
            }
        }
        if self.gammas.iter().any(|g| !(g.factor > 0.0 && g.factor <= 1.0)) {
            return Err(FlowerError::Precondition("gamma factors must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn rate(&self, step: usize, epoch: usize) -> f64 {
        let base = match self.decay {
            Decay::Constant => self.initial,
            Decay::Power { power } => self.initial / ((step + 1) as f64).powf(power),
        };
        self.gammas.iter().filter(|g| epoch >= g.epoch).fold(base, |lr, g| lr * g.factor)
    }
}

/// Anything the noisy step can differentiate.
pub trait Objective {
    fn loss_grad(&self, params: &ParamSet) -> Result<(f64, GradMap)>;

    fn loss(&self, params: &ParamSet) -> Result<f64> {
        Ok(self.loss_grad(params)?.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseLossConfig {
    /// Weight of the prototype-drift penalty.
    pub lambda1: f64,
    /// Include the batch-mean KL of the posterior to uniform.
    pub kl: bool,
}

impl Default for BaseLossConfig {
    fn default() -> Self {
        Self { lambda1: 1.0, kl: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaseLossTerms {
    pub ce: f64,
    pub kl: f64,
    pub drift: f64,
    pub total: f64,
}

/// Base-task loss on one batch. The drift term compares prototypes at the
/// evaluated (perturbed) point against fixed reference prototypes taken from
/// the unperturbed weights; gradients flow only through the former.
pub struct BaseObjective<'a> {
    net: &'a ProtoNet,
    batch: &'a LabeledBatch,
    reference: Tensor,
    targets: Vec<usize>,
    cfg: BaseLossConfig,
}

impl<'a> BaseObjective<'a> {
    pub fn new(net: &'a ProtoNet, reference_params: &ParamSet, batch: &'a LabeledBatch, cfg: BaseLossConfig) -> Result<Self> {
        let classes = batch.classes();
        let emb = net.embed(reference_params, &batch.x)?;
        let table = crate::protonet::prototypes_from_embeddings(&emb, &batch.labels)?;
        let targets = batch
            .labels
            .iter()
            .map(|c| classes.binary_search(c).expect("label from batch"))
            .collect();
        Ok(Self { net, batch, reference: table.matrix()?, targets, cfg })
    }

    fn build(&self, g: &mut Graph, params: &ParamSet) -> Result<(Var, Var, Option<Var>, Option<Var>)> {
        g.bind(params)?;
        let x = g.constant(self.batch.x.clone());
        let z = self.net.embed_var(g, x)?;
        let (protos, _) = prototypes_var(g, z, &self.batch.labels)?;
        let mode = self.net.distance();
        let ce = ce_loss_var(g, z, protos, &self.targets, mode)?;
        let mut total = ce;
        let kl = if self.cfg.kl {
            let kl = kl_uniform_var(g, z, protos, mode)?;
            total = g.add(total, kl)?;
            Some(kl)
        } else {
            None
        };
        let drift = if self.cfg.lambda1 != 0.0 {
            let r = g.constant(self.reference.clone());
            let diff = g.sub(protos, r)?;
            let norms = g.row_norm(diff);
            let drift = g.mean(norms);
            let weighted = g.scale(drift, self.cfg.lambda1);
            total = g.add(total, weighted)?;
            Some(drift)
        } else {
            None
        };
        Ok((total, ce, kl, drift))
    }

    pub fn terms(&self, params: &ParamSet) -> Result<BaseLossTerms> {
        let mut g = Graph::new();
        let (total, ce, kl, drift) = self.build(&mut g, params)?;
        let item = |v: Option<Var>| v.map_or(Ok(0.0), |v| g.value(v).item());
        Ok(BaseLossTerms {
            ce: g.value(ce).item()?,
            kl: item(kl)?,
            drift: item(drift)?,
            total: g.value(total).item()?,
        })
    }
}

impl Objective for BaseObjective<'_> {
    fn loss_grad(&self, params: &ParamSet) -> Result<(f64, GradMap)> {
        let mut g = Graph::new();
        let (total, ..) = self.build(&mut g, params)?;
        Ok((g.value(total).item()?, g.gradients(total, params)?))
    }
}

/// Value of the base loss at `perturbed`, with reference prototypes from `params`.
pub fn base_loss(
    net: &ProtoNet,
    params: &ParamSet,
    perturbed: &ParamSet,
    batch: &LabeledBatch,
    cfg: BaseLossConfig,
) -> Result<BaseLossTerms> {
    BaseObjective::new(net, params, batch, cfg)?.terms(perturbed)
}

/// Loss and gradient of one perturbed trial.
#[derive(Clone, Debug)]
pub struct Trial {
    pub loss: f64,
    pub grad: GradMap,
}

/// Evaluates `objective` once per noise map, perturbing `params` in place and
/// restoring the targeted tensors from a saved copy after every trial.
pub fn perturbed_trials<O: Objective + ?Sized>(
    objective: &O,
    params: &mut ParamSet,
    noises: &[NoiseMap],
) -> Result<Vec<Trial>> {
    let mut out = Vec::with_capacity(noises.len());
    for noise in noises {
        let saved: Vec<(String, Tensor)> = noise
            .keys()
            .map(|id| {
                params
                    .get(id)
                    .cloned()
                    .map(|t| (id.clone(), t))
                    .ok_or_else(|| FlowerError::UnknownParam(id.clone()))
            })
            .collect::<Result<_>>()?;
        for (id, eps) in noise {
            let p = params.get_mut(id).expect("checked above");
            if p.shape() != eps.shape() {
                return Err(FlowerError::ShapeMismatch {
                    node: id.clone(),
                    expected: p.shape().to_vec(),
                    got: eps.shape().to_vec(),
                });
            }
            for (w, e) in p.data_mut().iter_mut().zip(eps.data()) {
                *w += e;
            }
        }
        let result = objective.loss_grad(params);
        for (id, t) in saved {
            *params.get_mut(&id).expect("checked above") = t;
        }
        let (loss, grad) = result?;
        out.push(Trial { loss, grad });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct StepInfo {
    pub mean_loss: f64,
    pub direction: GradMap,
    pub trials: Vec<f64>,
}

/// One noisy update: mean gradient over the trials, then `θ ← θ − lr·ḡ`.
/// An empty `noises` slice evaluates the unperturbed point once.
pub fn flat_step<O: Objective + ?Sized>(
    objective: &O,
    params: &mut ParamSet,
    noises: &[NoiseMap],
    lr: f64,
    grad_clip: Option<f64>,
) -> Result<StepInfo> {
    let trials = if noises.is_empty() {
        let (loss, grad) = objective.loss_grad(params)?;
        vec![Trial { loss, grad }]
    } else {
        perturbed_trials(objective, params, noises)?
    };
    if let Some(i) = trials.iter().position(|t| !t.loss.is_finite() || !t.grad.is_finite()) {
        return Err(FlowerError::Diverged { epoch: 0, trial: i, loss: trials[i].loss });
    }
    let grads: Vec<GradMap> = trials.iter().map(|t| t.grad.clone()).collect();
    let mut direction = GradMap::mean(&grads)?;
    if let Some(c) = grad_clip {
        direction.clip_norm(c);
    }
    params.apply_sgd(&direction, lr)?;
    let losses: Vec<f64> = trials.iter().map(|t| t.loss).collect();
    Ok(StepInfo {
        mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
        direction,
        trials: losses,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub epoch_loss: Vec<f64>,
    /// `‖mean gradient‖²` of every update, in order.
    pub grad_norm_sq: Vec<f64>,
    pub updates_per_epoch: usize,
}

pub fn gradient_norm_trace(diag: &Diagnostics) -> &[f64] {
    &diag.grad_norm_sq
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: BaseLossConfig,
    /// When false the weights are never perturbed and one trial is used.
    pub perturb: bool,
    pub schedule: LrSchedule,
    pub grad_clip: Option<f64>,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 100,
            loss: BaseLossConfig::default(),
            perturb: true,
            schedule: LrSchedule::constant(0.1).with_gamma(30, 0.1),
            grad_clip: Some(1.0),
        }
    }
}

pub struct BaseOutcome {
    pub params: ParamSet,
    pub region: FlatWideRegion,
    pub diagnostics: Diagnostics,
}

/// Trains on the base task. Randomness comes from the `BaseShuffle` and
/// `BaseNoise` substreams of `seed`, one per epoch.
pub fn train_base(
    net: &ProtoNet,
    mut params: ParamSet,
    data: &LabeledBatch,
    noise: &NoiseSpec,
    cfg: &BaseTrainConfig,
    seed: u64,
) -> Result<BaseOutcome> {
    if cfg.epochs == 0 {
        return Err(FlowerError::Precondition("base training needs at least one epoch".into()));
    }
    if cfg.batch_size == 0 {
        return Err(FlowerError::Precondition("batch size must be at least 1".into()));
    }
    noise.validate()?;
    cfg.schedule.validate()?;
    let targets = net.suffix_weight_ids(noise.target_layers)?;
    let n = data.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let mut diag = Diagnostics { updates_per_epoch: per_epoch, ..Default::default() };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(seed, Module::BaseShuffle, 0, epoch as u64));
        let mut noise_rng = substream(seed, Module::BaseNoise, 0, epoch as u64);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(chunk)?;
            let objective = BaseObjective::new(net, &params, &batch, cfg.loss)?;
            let noises = if cfg.perturb {
                (0..noise.trials)
                    .map(|_| sample_noise(noise, &params, &targets, &mut noise_rng))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let lr = cfg.schedule.rate(step, epoch);
            let info = flat_step(&objective, &mut params, &noises, lr, cfg.grad_clip).map_err(|e| match e {
                FlowerError::Diverged { trial, loss, .. } => FlowerError::Diverged { epoch, trial, loss },
                other => other,
            })?;
            diag.grad_norm_sq.push(info.direction.norm_sq());
            epoch_loss += info.mean_loss;
            step += 1;
        }
        diag.epoch_loss.push(epoch_loss / per_epoch as f64);
    }
    let region = FlatWideRegion::new(&params, noise.bound)?;
    Ok(BaseOutcome { params, region, diagnostics: diag })
}

/// Largest `|L(θ+ε) − L(θ)|` over `draws` fresh noise vectors.
pub fn flatness_probe<O: Objective + ?Sized, R: Rng + ?Sized>(
    objective: &O,
    params: &ParamSet,
    targets: &[String],
    noise: &NoiseSpec,
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    let at = objective.loss(params)?;
    let noises = (0..draws)
        .map(|_| sample_noise(noise, params, targets, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut work = params.clone();
    let trials = perturbed_trials(objective, &mut work, &noises)?;
    let worst = trials.iter().map(|t| (t.loss - at).abs()).fold(0.0, f64::max);
    if !worst.is_finite() {
        return Err(FlowerError::NonFinite("flatness probe".into()));
    }
    Ok(worst)
}

/// `½ Σ a_i (θ_i − c_i)²` over a single parameter `theta`.
#[derive(Clone, Debug)]
pub struct QuadraticBowl {
    pub curvature: Vec<f64>,
    pub center: Vec<f64>,
}

impl QuadraticBowl {
    pub const PARAM: &'static str = "theta";

    pub fn params(&self, start: Vec<f64>) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        p.insert(Self::PARAM, Partition::FeatureExtractor, Tensor::vector(start)?)?;
        Ok(p)
    }
}

impl Objective for QuadraticBowl {
    fn loss_grad(&self, params: &ParamSet) -> Result<(f64, GradMap)> {
        let theta = params.get(Self::PARAM).ok_or_else(|| FlowerError::UnknownParam(Self::PARAM.into()))?;
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(theta.len());
        for ((t, a), c) in theta.data().iter().zip(&self.curvature).zip(&self.center) {
            loss += 0.5 * a * (t - c) * (t - c);
            grad.push(a * (t - c));
        }
        let mut g = GradMap::new();
        g.insert(Self::PARAM, Tensor::vector(grad)?);
        Ok((loss, g))
    }
}

/// Runs `steps` noisy updates on `objective` with the per-step schedule and
/// returns the gradient-norm trace.
pub fn run_objective<O: Objective + ?Sized, R: Rng + ?Sized>(
    objective: &O,
    params: &mut ParamSet,
    targets: &[String],
    noise: &NoiseSpec,
    schedule: &LrSchedule,
    steps: usize,
    rng: &mut R,
) -> Result<Diagnostics> {
    schedule.validate()?;
    let mut diag = Diagnostics { updates_per_epoch: 1, ..Default::default() };
    for k in 0..steps {
        let noises = (0..noise.trials)
            .map(|_| sample_noise(noise, params, targets, rng))
            .collect::<Result<Vec<_>>>()?;
        let info = flat_step(objective, params, &noises, schedule.rate(k, 0), None)?;
        diag.grad_norm_sq.push(info.direction.norm_sq());
        diag.epoch_loss.push(info.mean_loss);
    }
    Ok(diag)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Growth {
    Bounded,
    Logarithmic,
    Polynomial,
}

impl Growth {
    pub fn diverges(self) -> bool {
        self != Growth::Bounded
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrScheduleReport {
    pub horizon: usize,
    pub sum: f64,
    pub sum_sq: f64,
    pub sum_growth: Growth,
    pub sum_sq_growth: Growth,
    pub positive: bool,
    pub non_increasing: bool,
    /// Rates sum to infinity while their squares stay finite.
    pub compliant: bool,
}

/// Classifies tail growth from partial sums at `K/16`, `K/4`, `K`.
///
/// For `λ_k ~ k^-p` the ratio of successive increments is about `4^(1-p)`:
/// below 1 the series converges, near 1 it grows like `log K`, above it grows
/// polynomially. The cut points leave a margin for the finite horizon.
fn classify(partial: &[f64], horizon: usize) -> Growth {
    let at = |k: usize| partial[k.max(1) - 1];
    let (s0, s1, s2) = (at(horizon / 16), at(horizon / 4), at(horizon));
    let (inc_lo, inc_hi) = (s1 - s0, s2 - s1);
    if inc_hi <= 0.0 {
        return Growth::Bounded;
    }
    let ratio = if inc_lo > 0.0 { inc_hi / inc_lo } else { f64::INFINITY };
    if ratio < 0.75 {
        Growth::Bounded
    } else if ratio <= 1.5 {
        Growth::Logarithmic
    } else {
        Growth::Polynomial
    }
}

/// Checks the usual step-size conditions numerically over the first
/// `horizon` updates. Gamma events are applied as if every update were an epoch.
pub fn check_lr_schedule(schedule: &LrSchedule, horizon: usize) -> Result<LrScheduleReport> {
    if horizon < 10 {
        return Err(FlowerError::Precondition("horizon must be at least 10".into()));
    }
    schedule.validate()?;
    let mut s1 = Vec::with_capacity(horizon);
    let mut s2 = Vec::with_capacity(horizon);
    let (mut a, mut b) = (0.0, 0.0);
    let mut positive = true;
    let mut non_increasing = true;
    let mut prev = f64::INFINITY;
    for k in 0..horizon {
        let lr = schedule.rate(k, k);
        positive &= lr > 0.0;
        non_increasing &= lr <= prev;
        prev = lr;
        a += lr;
        b += lr * lr;
        s1.push(a);
        s2.push(b);
    }
    let sum_growth = classify(&s1, horizon);
    let sum_sq_growth = classify(&s2, horizon);
    Ok(LrScheduleReport {
        horizon,
        sum: a,
        sum_sq: b,
        sum_growth,
        sum_sq_growth,
        positive,
        non_increasing,
        compliant: positive && sum_growth.diverges() && !sum_sq_growth.diverges(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_stream, StreamSpec};
    use crate::protonet::{class_posterior, kl_to_uniform, proto_ce_loss, prototypes_from_embeddings, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (ProtoNet, ParamSet, LabeledBatch) {
        let net = ProtoNet::new(ModelConfig { input_dim: 3, hidden: vec![4, 4], embedding_dim: 2, ..Default::default() })
            .unwrap();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let spec = StreamSpec {
            input_dim: 3,
            base_classes: 3,
            base_samples_per_class: 4,
            sessions: 0,
            test_per_class: 1,
            ..Default::default()
        };
        (net, params, generate_stream(&spec).unwrap().base)
    }

    #[test]
    fn zero_bound_rejected() {
        let (_, p, _) = toy();
        let spec = NoiseSpec { bound: 0.0, ..Default::default() };
        let err = sample_noise(&spec, &p, &[], &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, FlowerError::Precondition(_)));
    }

    #[test]
    fn discrete_beta_is_a_config_error() {
        let spec = NoiseSpec { mode: NoiseMode::DiscreteBeta, ..Default::default() };
        assert!(matches!(spec.validate(), Err(FlowerError::Config(_))));
    }

    #[test]
    fn uniform_noise_moments() {
        let mut p = ParamSet::new();
        p.insert("w", Partition::FeatureExtractor, Tensor::zeros(&[100_000])).unwrap();
        let spec = NoiseSpec { bound: 0.01, ..Default::default() };
        let n = sample_noise(&spec, &p, &["w".into()], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let d = n["w"].data();
        assert!(d.iter().all(|e| e.abs() <= 0.01));
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        // U(-b, b) has standard deviation b/sqrt(3).
        let se = 0.01 / 3f64.sqrt() / (d.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn only_suffix_layers_are_targeted() {
        let (net, p, _) = toy();
        let targets = net.suffix_weight_ids(1).unwrap();
        assert_eq!(targets, vec!["fe.1.weight".to_string()]);
        let n = sample_noise(&NoiseSpec::default(), &p, &targets, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(n.keys().collect::<Vec<_>>(), vec!["fe.1.weight"]);
        assert!(net.suffix_weight_ids(3).is_err());
    }

    #[test]
    fn zero_noise_has_no_drift() {
        let (net, p, batch) = toy();
        let t = base_loss(&net, &p, &p, &batch, BaseLossConfig { lambda1: 1.0, kl: true }).unwrap();
        assert!(t.drift.abs() < 1e-12);
        assert!((t.total - (t.ce + t.kl)).abs() < 1e-12);
    }

    #[test]
    fn lambda1_zero_ignores_drift() {
        let (net, p, batch) = toy();
        let mut q = p.clone();
        q.get_mut("fe.1.weight").unwrap().data_mut()[0] += 0.3;
        let cfg = BaseLossConfig { lambda1: 0.0, kl: true };
        let moved = base_loss(&net, &p, &q, &batch, cfg).unwrap();
        let same = base_loss(&net, &q, &q, &batch, cfg).unwrap();
        assert_eq!(moved.total, same.total);
    }

    #[test]
    fn base_loss_terms_match_oracle() {
        let (net, p, batch) = toy();
        let mut q = p.clone();
        for (i, v) in q.get_mut("fe.1.weight").unwrap().data_mut().iter_mut().enumerate() {
            *v += 0.01 * ((i % 3) as f64 - 1.0);
        }
        let t = base_loss(&net, &p, &q, &batch, BaseLossConfig { lambda1: 1.0, kl: true }).unwrap();

        let emb_p = net.embed(&p, &batch.x).unwrap();
        let emb_q = net.embed(&q, &batch.x).unwrap();
        let table_p = prototypes_from_embeddings(&emb_p, &batch.labels).unwrap();
        let table_q = prototypes_from_embeddings(&emb_q, &batch.labels).unwrap();
        let mode = net.distance();
        let ce = proto_ce_loss(&table_q, &emb_q, &batch.labels, mode).unwrap();
        let mut kl = 0.0;
        for i in 0..batch.len() {
            kl += kl_to_uniform(&class_posterior(&table_q, emb_q.row(i), mode).unwrap()).unwrap();
        }
        kl /= batch.len() as f64;
        let mut drift = 0.0;
        for (c, pq) in table_q.iter() {
            let pp = table_p.get(c).unwrap();
            drift += pq.iter().zip(pp).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        }
        drift /= table_q.len() as f64;
        assert!((t.ce - ce).abs() < 1e-12);
        assert!((t.kl - kl).abs() < 1e-12);
        assert!((t.drift - drift).abs() < 1e-12);
        assert!((t.total - (ce + kl + drift)).abs() < 1e-12);
        assert!(drift > 0.0);
    }

    #[test]
    fn trials_restore_parameters_bit_exactly() {
        let (net, mut p, batch) = toy();
        let before = p.fingerprint();
        let obj = BaseObjective::new(&net, &p, &batch, BaseLossConfig::default()).unwrap();
        let targets = net.suffix_weight_ids(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noises: Vec<NoiseMap> = (0..4)
            .map(|_| sample_noise(&NoiseSpec::default(), &p, &targets, &mut rng).unwrap())
            .collect();
        let trials = perturbed_trials(&obj, &mut p, &noises).unwrap();
        assert_eq!(p.fingerprint(), before);
        // Each trial equals a fresh evaluation at an explicitly perturbed copy.
        for (t, noise) in trials.iter().zip(&noises) {
            let mut q = p.clone();
            for (id, e) in noise {
                for (w, d) in q.get_mut(id).unwrap().data_mut().iter_mut().zip(e.data()) {
                    *w += d;
                }
            }
            let (l, _) = obj.loss_grad(&q).unwrap();
            assert_eq!(l, t.loss);
        }
    }

    #[test]
    fn update_follows_mean_trial_gradient() {
        let (net, p, batch) = toy();
        let obj = BaseObjective::new(&net, &p, &batch, BaseLossConfig::default()).unwrap();
        let targets = net.suffix_weight_ids(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noises: Vec<NoiseMap> = (0..3)
            .map(|_| sample_noise(&NoiseSpec::default(), &p, &targets, &mut rng).unwrap())
            .collect();
        let mut work = p.clone();
        let trials = perturbed_trials(&obj, &mut work, &noises).unwrap();
        let mut expected = GradMap::new();
        for (id, _) in p.iter() {
            let mut acc = vec![0.0; p.get(id).unwrap().len()];
            for t in &trials {
                for (a, g) in acc.iter_mut().zip(t.grad.get(id).unwrap().data()) {
                    *a += g;
                }
            }
            let n = trials.len() as f64;
            expected.insert(id, Tensor::new(p.get(id).unwrap().shape().to_vec(), acc.into_iter().map(|v| v / n).collect()).unwrap());
        }
        let lr = 0.05;
        let mut q = p.clone();
        flat_step(&obj, &mut q, &noises, lr, None).unwrap();
        for (id, param) in p.iter() {
            for ((before, after), g) in param
                .value
                .data()
                .iter()
                .zip(q.get(id).unwrap().data())
                .zip(expected.get(id).unwrap().data())
            {
                assert!(((before - after) / lr - g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use crate::autodiff::{finite_diff_grad, max_relative_error};
        let (net, p, batch) = toy();
        let mut q = p.clone();
        q.get_mut("fe.0.weight").unwrap().data_mut()[1] += 0.05;
        let obj = BaseObjective::new(&net, &p, &batch, BaseLossConfig::default()).unwrap();
        let (_, analytic) = obj.loss_grad(&q).unwrap();
        let numeric = finite_diff_grad(&q, 1e-5, |x| obj.loss(x)).unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "{err}");
    }

    fn two_class_task() -> (ProtoNet, ParamSet, LabeledBatch) {
        let net = ProtoNet::new(ModelConfig { input_dim: 16, hidden: vec![16, 16, 16], embedding_dim: 8, ..Default::default() })
            .unwrap();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let spec = StreamSpec {
            input_dim: 16,
            base_classes: 2,
            base_samples_per_class: 50,
            sessions: 0,
            test_per_class: 1,
            cluster_spread: 0.2,
            seed: 11,
            ..Default::default()
        };
        (net, params, generate_stream(&spec).unwrap().base)
    }

    #[test]
    fn separable_task_is_learned() {
        let (net, params, data) = two_class_task();
        let cfg = BaseTrainConfig { epochs: 50, batch_size: 25, ..Default::default() };
        let out = train_base(&net, params, &data, &NoiseSpec::default(), &cfg, 0).unwrap();
        let emb = net.embed(&out.params, &data.x).unwrap();
        let table = prototypes_from_embeddings(&emb, &data.labels).unwrap();
        let correct = (0..data.len())
            .filter(|&i| crate::protonet::nearest_class(&table, emb.row(i), net.distance()).unwrap() == data.labels[i])
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.95);
        assert_eq!(out.region.bound, 0.01);
        assert_eq!(out.diagnostics.grad_norm_sq.len(), 50 * 4);
        assert_eq!(out.region.max_deviation(&out.params), 0.0);
    }

    #[test]
    fn tiny_noise_tracks_plain_sgd() {
        let (net, params, data) = two_class_task();
        let loss = BaseLossConfig { lambda1: 0.0, kl: true };
        let noisy = BaseTrainConfig { epochs: 5, batch_size: 25, loss, ..Default::default() };
        let plain = BaseTrainConfig { perturb: false, ..noisy.clone() };
        let spec = NoiseSpec { bound: 1e-8, trials: 1, ..Default::default() };
        let a = train_base(&net, params.clone(), &data, &spec, &noisy, 0).unwrap();
        let b = train_base(&net, params, &data, &spec, &plain, 0).unwrap();
        for (x, y) in a.diagnostics.grad_norm_sq.iter().zip(&b.diagnostics.grad_norm_sq) {
            assert!((x - y).abs() < 1e-3);
        }
        for (id, p) in a.params.iter() {
            for (x, y) in p.value.data().iter().zip(b.params.get(id).unwrap().data()) {
                assert!((x - y).abs() < 1e-3);
            }
        }
    }

    struct Flat;
    impl Objective for Flat {
        fn loss_grad(&self, params: &ParamSet) -> Result<(f64, GradMap)> {
            Ok((3.0, GradMap::zeros_like(params)))
        }
    }

    #[test]
    fn constant_objective_has_zero_trace() {
        let mut p = QuadraticBowl { curvature: vec![1.0], center: vec![0.0] }.params(vec![1.0]).unwrap();
        let d = run_objective(
            &Flat,
            &mut p,
            &["theta".into()],
            &NoiseSpec::default(),
            &LrSchedule::constant(0.1),
            20,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(gradient_norm_trace(&d).len(), 20);
        assert!(gradient_norm_trace(&d).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quadratic_gradient_norm_decays() {
        let bowl = QuadraticBowl { curvature: vec![0.5, 1.0, 1.5, 2.0], center: vec![1.0, -1.0, 0.5, 2.0] };
        let mut p = bowl.params(vec![0.0; 4]).unwrap();
        let d = run_objective(
            &bowl,
            &mut p,
            &["theta".into()],
            &NoiseSpec { trials: 2, ..Default::default() },
            &LrSchedule::power(0.5, 1.0),
            10_000,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let t = gradient_norm_trace(&d);
        assert!(t[t.len() - 1] < 0.1 * t[0]);
    }

    #[test]
    fn schedule_checks() {
        let harmonic = check_lr_schedule(&LrSchedule::power(1.0, 1.0), 1_000_000).unwrap();
        assert!(harmonic.sum_growth.diverges());
        assert!((harmonic.sum - (1_000_000f64.ln() + 0.5772)).abs() < 1e-3);
        assert!(!harmonic.sum_sq_growth.diverges());
        assert!(harmonic.sum_sq < std::f64::consts::PI.powi(2) / 6.0);
        assert!(harmonic.compliant);

        let constant = check_lr_schedule(&LrSchedule::constant(0.1), 10_000).unwrap();
        assert!(constant.sum_sq_growth.diverges());
        assert!(!constant.compliant);

        let square = check_lr_schedule(&LrSchedule::power(1.0, 2.0), 10_000).unwrap();
        assert!(!square.sum_growth.diverges());
        assert!(!square.compliant);

        assert!(check_lr_schedule(&LrSchedule::constant(0.1), 9).is_err());
    }

    #[test]
    fn gamma_events_scale_rate() {
        let s = LrSchedule::constant(0.1).with_gamma(3, 0.1);
        assert_eq!(s.rate(0, 2), 0.1);
        assert!((s.rate(0, 3) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn flatness_probe_is_finite() {
        let (net, p, batch) = toy();
        let obj = BaseObjective::new(&net, &p, &batch, BaseLossConfig::default()).unwrap();
        let v = flatness_probe(
            &obj,
            &p,
            &net.suffix_weight_ids(2).unwrap(),
            &NoiseSpec::default(),
            20,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }
}
