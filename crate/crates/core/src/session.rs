//! The continual-learning state machine: base phase, then one update per
//! few-shot session with clamping, prototype growth and importance bookkeeping.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Graph, ParamSet, Tensor, Var};
use crate::ball::{ball_loss_var, fit_ball, synthesize_var, BallGenConfig, SyntheticDraw, TransformModule};
use crate::data::{LabeledBatch, Stream};
use crate::error::{FlowerError, Result};
use crate::flat::{
    train_base, BaseLossConfig, BaseTrainConfig, Diagnostics, FlatWideRegion, LrSchedule, NoiseSpec, Objective,
};
use crate::harness::eval::{evaluate, SessionResult};
use crate::pmas::{pmas_penalty_var, take_snapshot, task_importance, ImportanceMatrix, ParamSnapshot, PmasConfig};
use crate::protonet::{ce_loss_var, compute_prototypes, prototypes_var, ModelConfig, PrototypeTable, ProtoNet};
use crate::rng::{substream, Module};
use crate::ClassId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Flower,
    /// Flat-wide base training, then prototype-only sessions.
    FlowerProtoOnly,
    /// Plain base training, then prototype-only sessions.
    BaselineProtoOnly,
    Finetune,
    NoFm,
    NoPmas,
    NoBall,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Flower,
        Method::FlowerProtoOnly,
        Method::BaselineProtoOnly,
        Method::Finetune,
        Method::NoFm,
        Method::NoPmas,
        Method::NoBall,
    ];

    /// The toggle matrix run by `ablate`.
    pub const ABLATION: [Method; 4] = [Method::Flower, Method::NoFm, Method::NoPmas, Method::NoBall];

    pub fn name(self) -> &'static str {
        match self {
            Method::Flower => "flower",
            Method::FlowerProtoOnly => "flower-proto-only",
            Method::BaselineProtoOnly => "baseline-proto-only",
            Method::Finetune => "finetune",
            Method::NoFm => "no-fm",
            Method::NoPmas => "no-pmas",
            Method::NoBall => "no-ball",
        }
    }

    fn plain_base(self) -> bool {
        matches!(self, Method::BaselineProtoOnly | Method::Finetune)
    }

    /// Base training with weight noise and the drift penalty.
    pub fn flat_base(self) -> bool {
        !self.plain_base() && self != Method::NoFm
    }

    pub fn trains_sessions(self) -> bool {
        !matches!(self, Method::BaselineProtoOnly | Method::FlowerProtoOnly)
    }

    pub fn uses_ball(self) -> bool {
        matches!(self, Method::Flower | Method::NoFm | Method::NoPmas)
    }

    pub fn uses_pmas(self) -> bool {
        matches!(self, Method::Flower | Method::NoFm | Method::NoBall)
    }

    pub fn clamps(self) -> bool {
        matches!(self, Method::Flower | Method::NoPmas | Method::NoBall)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = FlowerError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| FlowerError::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub grad_clip: Option<f64>,
    /// Rescale each task's importance so its largest entry is 1.
    pub normalize_importance: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            schedule: LrSchedule::constant(0.05).with_gamma(10, 1e-6),
            grad_clip: Some(1.0),
            normalize_importance: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunnerConfig {
    pub method: Method,
    pub model: ModelConfig,
    pub noise: NoiseSpec,
    pub base: BaseTrainConfig,
    pub ball: BallGenConfig,
    pub pmas: PmasConfig,
    pub session: SessionConfig,
}

impl Default for RunnerConfig {
    fn default() -> Self {
        Self {
            method: Method::Flower,
            model: ModelConfig::default(),
            noise: NoiseSpec::default(),
            base: BaseTrainConfig::default(),
            ball: BallGenConfig::default(),
            pmas: PmasConfig::default(),
            session: SessionConfig::default(),
        }
    }
}

impl RunnerConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.noise.validate()?;
        self.ball.validate()?;
        self.base.schedule.validate()?;
        self.session.schedule.validate()?;
        if self.noise.target_layers > self.model.hidden.len() {
            return Err(FlowerError::Config(format!(
                "noise targets {} layers but the feature extractor has {}",
                self.noise.target_layers,
                self.model.hidden.len()
            )));
        }
        for (name, v) in [("lambda3", self.pmas.lambda3), ("lambda4", self.pmas.lambda4), ("lambda1", self.base.loss.lambda1)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FlowerError::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Base-phase settings after applying the method's toggles.
    pub fn effective_base(&self) -> BaseTrainConfig {
        let mut base = self.base.clone();
        if self.method.plain_base() {
            base.loss = BaseLossConfig { lambda1: 0.0, kl: false };
            base.perturb = false;
        } else if self.method == Method::NoFm {
            base.loss.lambda1 = 0.0;
            base.perturb = false;
        }
        base
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualState {
    /// Feature extractor, head and transformation network.
    pub params: ParamSet,
    pub prototypes: PrototypeTable,
    pub region: FlatWideRegion,
    pub importance: ImportanceMatrix,
    pub snapshot: ParamSnapshot,
    /// Number of completed tasks, the base task included.
    pub session: usize,
    pub base_diagnostics: Diagnostics,
}

/// Projects the feature extractor into the region's box; other partitions are untouched.
pub fn clamp_feature_extractor(params: &mut ParamSet, region: &FlatWideRegion) {
    let b = region.bound;
    for (id, anchor) in region.anchor.iter() {
        if let Some(p) = params.get_mut(id) {
            for (w, a) in p.data_mut().iter_mut().zip(anchor.value.data()) {
                *w = w.clamp(a - b, a + b);
            }
        }
    }
}

fn scaled_importance(xi: ImportanceMatrix, normalize: bool) -> ImportanceMatrix {
    if normalize {
        xi.normalized()
    } else {
        xi
    }
}

/// Trains the base task and sets up the state for the first few-shot session.
pub fn run_base(net: &ProtoNet, transform: &TransformModule, data: &LabeledBatch, cfg: &RunnerConfig, seed: u64) -> Result<ContinualState> {
    cfg.validate()?;
    let mut rng = substream(seed, Module::Init, 0, 0);
    let mut params = net.init_params(&mut rng)?;
    transform.init_params(cfg.model.embedding_dim, &cfg.ball.transform_hidden, &mut params, &mut rng)?;
    let out = train_base(net, params, data, &cfg.noise, &cfg.effective_base(), seed)?;
    let prototypes = compute_prototypes(net, &out.params, data)?;
    let importance = scaled_importance(
        ImportanceMatrix::from_task(task_importance(net, &out.params, &data.x)?),
        cfg.session.normalize_importance,
    );
    Ok(ContinualState {
        snapshot: take_snapshot(&out.params),
        params: out.params,
        prototypes,
        region: out.region,
        importance,
        session: 1,
        base_diagnostics: out.diagnostics,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SessionLossTerms {
    pub ce: f64,
    pub ball: f64,
    pub projection: f64,
    pub anchoring: f64,
    pub total: f64,
}

/// Synthetic draws and the ball geometry they are placed in. The balls are
/// fit on the embeddings at the start of an epoch and held fixed, so the
/// hinge term only shapes the transformation network.
#[derive(Clone, Debug)]
pub struct BallTerm {
    pub draw: SyntheticDraw,
    pub margin: f64,
    pub lambda2: f64,
    /// Old prototypes followed by the new balls' centres.
    centers: Tensor,
    /// One row per new class.
    new_centers: Tensor,
    radii: Tensor,
}

impl BallTerm {
    pub fn fit(
        net: &ProtoNet,
        params: &ParamSet,
        data: &LabeledBatch,
        old: &PrototypeTable,
        draw: SyntheticDraw,
        margin: f64,
        lambda2: f64,
    ) -> Result<Self> {
        let z = net.embed(params, &data.x)?;
        let mut centers = Vec::new();
        let mut radii = Vec::new();
        for c in data.classes() {
            let rows: Vec<&[f64]> = (0..z.rows()).filter(|&i| data.labels[i] == c).map(|i| z.row(i)).collect();
            let ball = fit_ball(c, &rows)?;
            centers.push(ball.center);
            radii.push(vec![ball.radius]);
        }
        let mut all: Vec<Vec<f64>> = old.iter().map(|(_, p)| p.to_vec()).collect();
        all.extend(centers.iter().cloned());
        Ok(Self {
            draw,
            margin,
            lambda2,
            centers: Tensor::from_rows(&all)?,
            new_centers: Tensor::from_rows(&centers)?,
            radii: Tensor::from_rows(&radii)?,
        })
    }

    pub fn radii(&self) -> &Tensor {
        &self.radii
    }
}

/// Joint few-shot loss for one epoch. Old classes keep their stored
/// prototypes; new classes use the live mean of their real embeddings, which
/// is also the centre of their ball.
pub struct SessionObjective<'a> {
    pub net: &'a ProtoNet,
    pub transform: &'a TransformModule,
    pub data: &'a LabeledBatch,
    pub old: &'a PrototypeTable,
    /// `None` disables augmentation.
    pub ball: Option<BallTerm>,
    pub pmas: Option<(&'a ParamSnapshot, &'a ImportanceMatrix, PmasConfig)>,
}

struct Built {
    total: Var,
    ce: Var,
    ball: Option<Var>,
    pmas: Option<(Var, Var)>,
}

impl SessionObjective<'_> {
    fn build(&self, g: &mut Graph, params: &ParamSet) -> Result<Built> {
        let new_classes = self.data.classes();
        g.bind(params)?;
        let x = g.constant(self.data.x.clone());
        let z = self.net.embed_var(g, x)?;
        let (centers, _) = prototypes_var(g, z, &self.data.labels)?;
        let mut classes = self.old.classes();
        let all = if self.old.is_empty() {
            centers
        } else {
            let old = g.constant(self.old.matrix()?);
            g.concat_rows(&[old, centers])?
        };
        classes.extend(&new_classes);
        let index = |c: &ClassId| classes.iter().position(|k| k == c).expect("class in table");

        let mut feats = z;
        let mut labels = self.data.labels.clone();
        let mut ball = None;
        if let Some(term) = &self.ball {
            let fixed_centers = g.constant(term.new_centers.clone());
            let fixed_radii = g.constant(term.radii.clone());
            let raw = synthesize_var(g, fixed_centers, fixed_radii, &term.draw)?;
            let synth = self.transform.forward_var(g, raw)?;
            let synth_labels: Vec<ClassId> = term.draw.class_pos.iter().map(|&p| new_classes[p]).collect();
            let own: Vec<usize> = synth_labels.iter().map(index).collect();
            let negatives = g.constant(term.centers.clone());
            ball = Some(ball_loss_var(g, synth, negatives, &own, term.margin, term.lambda2)?);
            feats = g.concat_rows(&[z, synth])?;
            labels.extend(synth_labels);
        }
        let targets: Vec<usize> = labels.iter().map(index).collect();
        let ce = ce_loss_var(g, feats, all, &targets, self.net.distance())?;
        let mut total = ce;
        if let Some(b) = ball {
            total = g.add(total, b)?;
        }
        let mut pmas = None;
        if let Some((snapshot, xi, cfg)) = self.pmas {
            let (p, proj, anch) = pmas_penalty_var(g, z, all, self.net.distance(), Some(snapshot), xi, cfg)?;
            total = g.add(total, p)?;
            pmas = Some((proj, anch));
        }
        Ok(Built { total, ce, ball, pmas })
    }

    pub fn terms(&self, params: &ParamSet) -> Result<SessionLossTerms> {
        let mut g = Graph::new();
        let b = self.build(&mut g, params)?;
        let item = |v: Option<Var>| v.map_or(Ok(0.0), |v| g.value(v).item());
        Ok(SessionLossTerms {
            ce: g.value(b.ce).item()?,
            ball: item(b.ball)?,
            projection: item(b.pmas.map(|p| p.0))?,
            anchoring: item(b.pmas.map(|p| p.1))?,
            total: g.value(b.total).item()?,
        })
    }
}

impl Objective for SessionObjective<'_> {
    fn loss_grad(&self, params: &ParamSet) -> Result<(f64, GradMap)> {
        let mut g = Graph::new();
        let b = self.build(&mut g, params)?;
        Ok((g.value(b.total).item()?, g.gradients(b.total, params)?))
    }
}

/// Reported after every parameter update of a session.
pub struct StepEvent<'a> {
    pub session: usize,
    pub epoch: usize,
    pub loss: f64,
    pub params: &'a ParamSet,
    pub region: &'a FlatWideRegion,
}

/// Runs one few-shot session and returns the next state.
pub fn run_session(
    net: &ProtoNet,
    transform: &TransformModule,
    state: ContinualState,
    data: &LabeledBatch,
    cfg: &RunnerConfig,
    seed: u64,
    observer: &mut dyn FnMut(&StepEvent<'_>),
) -> Result<ContinualState> {
    if state.session == 0 {
        return Err(FlowerError::Precondition("run the base phase before any few-shot session".into()));
    }
    let new_classes = data.classes();
    let overlap: Vec<ClassId> = new_classes.iter().filter(|c| state.prototypes.contains(**c)).copied().collect();
    if !overlap.is_empty() {
        return Err(FlowerError::ClassOverlap(overlap));
    }
    let method = cfg.method;
    let k = state.session as u64;
    let mut params = state.params;

    if method.trains_sessions() {
        let shots = new_classes
            .iter()
            .map(|c| data.labels.iter().filter(|l| *l == c).count())
            .min()
            .unwrap_or(0);
        let per_class = cfg.ball.synthetic_count(shots);
        for epoch in 0..cfg.session.epochs {
            let ball = if method.uses_ball() {
                let mut rng = substream(seed, Module::Ball, k, epoch as u64);
                SyntheticDraw::sample(new_classes.len(), per_class, cfg.model.embedding_dim, &mut rng)?
                    .map(|d| BallTerm::fit(net, &params, data, &state.prototypes, d, cfg.ball.margin, cfg.ball.lambda2))
                    .transpose()?
            } else {
                None
            };
            let objective = SessionObjective {
                net,
                transform,
                data,
                old: &state.prototypes,
                ball,
                pmas: method.uses_pmas().then_some((&state.snapshot, &state.importance, cfg.pmas)),
            };
            let (loss, mut grads) = objective.loss_grad(&params)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(FlowerError::Diverged { epoch, trial: 0, loss });
            }
            if let Some(c) = cfg.session.grad_clip {
                grads.clip_norm(c);
            }
            params.apply_sgd(&grads, cfg.session.schedule.rate(epoch, epoch))?;
            if method.clamps() {
                clamp_feature_extractor(&mut params, &state.region);
            }
            observer(&StepEvent { session: state.session, epoch, loss, params: &params, region: &state.region });
        }
    }

    let mut prototypes = state.prototypes;
    prototypes.extend(&compute_prototypes(net, &params, data)?)?;
    let importance = if method.uses_pmas() {
        let task = ImportanceMatrix::from_task(task_importance(net, &params, &data.x)?);
        let task = scaled_importance(task, cfg.session.normalize_importance);
        state.importance.merge(&task)?
    } else {
        state.importance
    };
    Ok(ContinualState {
        snapshot: take_snapshot(&params),
        params,
        prototypes,
        region: state.region,
        importance,
        session: state.session + 1,
        base_diagnostics: state.base_diagnostics,
    })
}

/// Base phase plus every session of `stream`, evaluated after each task on
/// the held-out samples of all classes seen so far.
pub fn run_stream(stream: &Stream, cfg: &RunnerConfig, seed: u64) -> Result<Vec<SessionResult>> {
    run_stream_observed(stream, cfg, seed, &mut |_| {})
}

pub fn run_stream_observed(
    stream: &Stream,
    cfg: &RunnerConfig,
    seed: u64,
    observer: &mut dyn FnMut(&StepEvent<'_>),
) -> Result<Vec<SessionResult>> {
    stream.validate_disjoint()?;
    let net = ProtoNet::new(cfg.model.clone())?;
    let transform = TransformModule::new();
    let timer = Instant::now();
    let mut state = run_base(&net, &transform, &stream.base, cfg, seed)?;
    let mut first = evaluate(&net, &state, &stream.test, cfg.method, seed)?;
    first.wall_time_s = timer.elapsed().as_secs_f64();
    let mut results = vec![first];
    for data in &stream.sessions {
        let timer = Instant::now();
        state = run_session(&net, &transform, state, data, cfg, seed, observer)?;
        let mut r = evaluate(&net, &state, &stream.test, cfg.method, seed)?;
        r.wall_time_s = timer.elapsed().as_secs_f64();
        results.push(r);
    }
    Ok(results)
}
