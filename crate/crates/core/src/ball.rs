//! Feature-space augmentation: per-class enclosing balls, uniform sampling
//! inside them, a residual transformation network and the margin loss that
//! keeps synthetic samples closer to their own class centre than to any other.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Mlp, ParamSet, Partition, Tensor, Var};
use crate::error::{FlowerError, Result};
use crate::ClassId;

/// Attempts at drawing a nonzero direction before giving up.
pub const DIRECTION_RETRIES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBall {
    pub class: ClassId,
    pub center: Vec<f64>,
    pub radius: f64,
}

/// Centroid-anchored enclosing ball: centre at the mean, radius to the
/// farthest point. Never smaller than the exact minimal ball and at most
/// twice its radius.
pub fn fit_ball(class: ClassId, features: &[&[f64]]) -> Result<ClassBall> {
    let Some(first) = features.first() else {
        return Err(FlowerError::EmptyClass(class));
    };
    let d = first.len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(FlowerError::Precondition(format!("inconsistent feature dimensions for class {class}")));
    }
    let n = features.len() as f64;
    let mut center = vec![0.0; d];
    for f in features {
        for (c, v) in center.iter_mut().zip(*f) {
            *c += v;
        }
    }
    center.iter_mut().for_each(|c| *c /= n);
    let radius = features
        .iter()
        .map(|f| f.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    Ok(ClassBall { class, center, radius })
}

/// `center + u^(1/D) · radius · φ/‖φ‖`.
pub fn sample_in_ball(ball: &ClassBall, u: f64, phi: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&u) {
        return Err(FlowerError::Precondition(format!("u must lie in [0, 1], got {u}")));
    }
    let d = ball.center.len();
    if phi.len() != d {
        return Err(FlowerError::ShapeMismatch { node: "direction".into(), expected: vec![d], got: vec![phi.len()] });
    }
    let norm = phi.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(FlowerError::DegenerateDirection(1));
    }
    let scale = u.powf(1.0 / d as f64) * ball.radius / norm;
    Ok(ball.center.iter().zip(phi).map(|(c, p)| c + scale * p).collect())
}

/// Unit vector uniform on the sphere, redrawn while the Gaussian draw is zero.
pub fn draw_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Vec<f64>> {
    for _ in 0..DIRECTION_RETRIES {
        let phi: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = phi.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            return Ok(phi.into_iter().map(|v| v / norm).collect());
        }
    }
    Err(FlowerError::DegenerateDirection(DIRECTION_RETRIES))
}

/// Radial offset `u^(1/D) · φ/‖φ‖` for a unit-radius ball.
pub fn draw_offset<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Vec<f64>> {
    let u: f64 = rng.random();
    let dir = draw_direction(dim, rng)?;
    let s = u.powf(1.0 / dim as f64);
    Ok(dir.into_iter().map(|v| v * s).collect())
}

pub fn draw_in_ball<R: Rng + ?Sized>(ball: &ClassBall, rng: &mut R) -> Result<Vec<f64>> {
    let off = draw_offset(ball.center.len(), rng)?;
    Ok(ball.center.iter().zip(off).map(|(c, o)| c + ball.radius * o).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BallGenConfig {
    /// Synthetic samples per class; `None` means five per real shot.
    pub synthetic: Option<usize>,
    pub margin: f64,
    pub lambda2: f64,
    /// Widths of the two hidden layers of the transformation network; its
    /// output width is the embedding dimension.
    pub transform_hidden: Vec<usize>,
}

impl Default for BallGenConfig {
    fn default() -> Self {
        Self { synthetic: None, margin: 1.0, lambda2: 1.0, transform_hidden: vec![32, 32] }
    }
}

impl BallGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) || !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(FlowerError::Precondition("margin and lambda2 must be finite and non-negative".into()));
        }
        if self.transform_hidden.len() != 2 || self.transform_hidden.contains(&0) {
            return Err(FlowerError::Precondition("transform_hidden must list two positive widths".into()));
        }
        Ok(())
    }

    pub fn synthetic_count(&self, shots: usize) -> usize {
        self.synthetic.unwrap_or(5 * shots)
    }
}

/// Three fully connected layers with a skip connection around them. The last
/// layer starts at zero, so the module is exactly the identity when built.
#[derive(Clone, Debug)]
pub struct TransformModule {
    mlp: Mlp,
}

impl Default for TransformModule {
    fn default() -> Self {
        Self::new()
    }
}

impl TransformModule {
    pub fn new() -> Self {
        let mut mlp = Mlp::chain("transform", 3, Activation::Identity);
        mlp.residual = true;
        Self { mlp }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn init_params<R: Rng + ?Sized>(
        &self,
        dim: usize,
        hidden: &[usize],
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<()> {
        if hidden.len() != 2 {
            return Err(FlowerError::Precondition("the transformation network has two hidden layers".into()));
        }
        self.mlp.init_params(&[dim, hidden[0], hidden[1], dim], Partition::Transformation, params, rng)?;
        let last = &self.mlp.layers[2];
        for id in [&last.weight, &last.bias] {
            params.get_mut(id).expect("just inserted").data_mut().fill(0.0);
        }
        Ok(())
    }

    pub fn forward_var(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.mlp.forward_var(g, z)
    }

    pub fn forward(&self, params: &ParamSet, z: &Tensor) -> Result<Tensor> {
        self.mlp.forward(params, z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BallLoss {
    pub value: f64,
    /// Set when only one class exists, so there are no negatives.
    pub single_class: bool,
}

/// `λ2 · Σ_samples Σ_{j ≠ own} max(0, d(z, C_own) + r − d(z, C_j))`, always
/// with Euclidean distance.
pub fn ball_loss(samples: &Tensor, labels: &[ClassId], balls: &[ClassBall], margin: f64, lambda2: f64) -> Result<BallLoss> {
    if samples.rows() != labels.len() {
        return Err(FlowerError::Precondition("sample/label count mismatch".into()));
    }
    if balls.len() < 2 {
        return Ok(BallLoss { value: 0.0, single_class: true });
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, y) in labels.iter().enumerate() {
        let own = balls.iter().find(|b| b.class == *y).ok_or(FlowerError::UnknownClass(*y))?;
        let z = samples.row(i);
        let d_own = dist(z, &own.center);
        for other in balls.iter().filter(|b| b.class != *y) {
            total += (d_own + margin - dist(z, &other.center)).max(0.0);
        }
    }
    Ok(BallLoss { value: lambda2 * total, single_class: false })
}

/// Tape version of [`ball_loss`]: `own[i]` is the row of `centers` holding the
/// centre of sample `i`'s class.
pub fn ball_loss_var(g: &mut Graph, z: Var, centers: Var, own: &[usize], margin: f64, lambda2: f64) -> Result<Var> {
    let n = g.value(z).rows();
    let m = g.value(centers).rows();
    if own.len() != n || own.iter().any(|&k| k >= m) {
        return Err(FlowerError::Precondition("every sample needs its own class centre".into()));
    }
    if m < 2 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let d = g.dist(z, centers, false)?;
    let d_own = g.gather(d, own.to_vec())?;
    let d_own = g.reshape(d_own, vec![n, 1])?;
    let ones = g.constant(Tensor::full(&[1, m], 1.0));
    let d_own = g.matmul(d_own, ones)?;
    let gap = g.sub(d_own, d)?;
    let gap = g.add_scalar(gap, margin);
    let hinge = g.relu(gap);
    let mut mask = vec![1.0; n * m];
    for (i, &k) in own.iter().enumerate() {
        mask[i * m + k] = 0.0;
    }
    let mask = g.constant(Tensor::matrix(n, m, mask)?);
    let masked = g.mul(hinge, mask)?;
    let s = g.sum(masked);
    Ok(g.scale(s, lambda2))
}

/// Pre-drawn randomness for one epoch of synthesis: for each synthetic sample,
/// the position of its class in the session's class list and a unit-ball offset.
#[derive(Clone, Debug)]
pub struct SyntheticDraw {
    pub class_pos: Vec<usize>,
    pub offsets: Tensor,
}

impl SyntheticDraw {
    pub fn sample<R: Rng + ?Sized>(n_classes: usize, per_class: usize, dim: usize, rng: &mut R) -> Result<Option<Self>> {
        if n_classes == 0 || per_class == 0 {
            return Ok(None);
        }
        let mut class_pos = Vec::with_capacity(n_classes * per_class);
        let mut rows = Vec::with_capacity(n_classes * per_class);
        for c in 0..n_classes {
            for _ in 0..per_class {
                class_pos.push(c);
                rows.push(draw_offset(dim, rng)?);
            }
        }
        Ok(Some(Self { class_pos, offsets: Tensor::from_rows(&rows)? }))
    }

    pub fn len(&self) -> usize {
        self.class_pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_pos.is_empty()
    }
}

/// Raw synthetic samples `centers[c] + radii[c] · offset`, shape `[S_total, D]`.
pub fn synthesize_var(g: &mut Graph, centers: Var, radii: Var, draw: &SyntheticDraw) -> Result<Var> {
    let d = g.value(centers).cols();
    let c = g.select_rows(centers, draw.class_pos.clone())?;
    let r = g.select_rows(radii, draw.class_pos.clone())?;
    let ones = g.constant(Tensor::full(&[1, d], 1.0));
    let r = g.matmul(r, ones)?;
    let off = g.constant(draw.offsets.clone());
    let scaled = g.mul(r, off)?;
    g.add(c, scaled)
}

/// Real embeddings plus transformed synthetic samples for one session.
#[derive(Clone, Debug)]
pub struct AugmentedSet {
    pub features: Tensor,
    pub labels: Vec<ClassId>,
    /// Pre-transform synthetic samples.
    pub raw_synthetic: Option<Tensor>,
    pub balls: Vec<ClassBall>,
}

impl AugmentedSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Value-level augmentation of already embedded session data.
pub fn augment_session<R: Rng + ?Sized>(
    transform: &TransformModule,
    params: &ParamSet,
    embeddings: &Tensor,
    labels: &[ClassId],
    cfg: &BallGenConfig,
    shots: usize,
    rng: &mut R,
) -> Result<AugmentedSet> {
    if shots == 0 {
        return Err(FlowerError::Precondition("sessions need at least one shot".into()));
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut balls = Vec::with_capacity(classes.len());
    for c in &classes {
        let rows: Vec<&[f64]> = (0..labels.len()).filter(|&i| labels[i] == *c).map(|i| embeddings.row(i)).collect();
        balls.push(fit_ball(*c, &rows)?);
    }
    let per_class = cfg.synthetic_count(shots);
    let Some(draw) = SyntheticDraw::sample(classes.len(), per_class, embeddings.cols(), rng)? else {
        return Ok(AugmentedSet { features: embeddings.clone(), labels: labels.to_vec(), raw_synthetic: None, balls });
    };
    let mut g = Graph::new();
    g.bind(params)?;
    let centers = g.constant(Tensor::from_rows(&balls.iter().map(|b| b.center.as_slice()).collect::<Vec<_>>())?);
    let radii = g.constant(Tensor::matrix(balls.len(), 1, balls.iter().map(|b| b.radius).collect())?);
    let raw = synthesize_var(&mut g, centers, radii, &draw)?;
    let out = transform.forward_var(&mut g, raw)?;
    let real = g.constant(embeddings.clone());
    let all = g.concat_rows(&[real, out])?;
    let mut all_labels = labels.to_vec();
    all_labels.extend(draw.class_pos.iter().map(|&p| classes[p]));
    Ok(AugmentedSet {
        features: g.value(all).clone(),
        labels: all_labels,
        raw_synthetic: Some(g.value(raw).clone()),
        balls,
    })
}
