//! Prototypical network: embedding `g(f(x))`, class prototypes, the
//! nearest-mean posterior and the losses built on it.
//!
//! Prototypes and distances live in the head-output space, so a prototype is
//! the mean of `g(f(x))` over a class's samples.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Mlp, ParamSet, Partition, Tensor, Var};
use crate::data::LabeledBatch;
use crate::error::{FlowerError, Result};
use crate::ClassId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMode {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

impl DistanceMode {
    pub fn is_squared(self) -> bool {
        matches!(self, DistanceMode::SquaredEuclidean)
    }

    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self {
            DistanceMode::Euclidean => s.sqrt(),
            DistanceMode::SquaredEuclidean => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub distance: DistanceMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden: vec![32, 32, 32],
            embedding_dim: 16,
            distance: DistanceMode::Euclidean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embedding_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(FlowerError::Precondition("model dimensions must be at least 1".into()));
        }
        Ok(())
    }
}

/// Feature extractor `f` (ReLU MLP, partition `FeatureExtractor`) followed by a
/// linear head `g` (partition `ClassifierHead`).
#[derive(Clone, Debug)]
pub struct ProtoNet {
    config: ModelConfig,
    feature: Mlp,
    head: Mlp,
}

impl ProtoNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let feature = Mlp::chain("fe", config.hidden.len(), Activation::Relu);
        let head = Mlp::chain("head", 1, Activation::Identity);
        Ok(Self { config, feature, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn distance(&self) -> DistanceMode {
        self.config.distance
    }

    pub fn feature(&self) -> &Mlp {
        &self.feature
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        let mut params = ParamSet::new();
        let mut dims = vec![self.config.input_dim];
        dims.extend(&self.config.hidden);
        self.feature.init_params(&dims, Partition::FeatureExtractor, &mut params, rng)?;
        let last = *dims.last().unwrap();
        self.head.init_params(
            &[last, self.config.embedding_dim],
            Partition::ClassifierHead,
            &mut params,
            rng,
        )?;
        Ok(params)
    }

    /// Weight ids of the last `n` feature-extractor layers.
    pub fn suffix_weight_ids(&self, n: usize) -> Result<Vec<String>> {
        let layers = &self.feature.layers;
        if n > layers.len() {
            return Err(FlowerError::Precondition(format!(
                "cannot target {n} layers of a {}-layer feature extractor",
                layers.len()
            )));
        }
        Ok(layers[layers.len() - n..].iter().map(|l| l.weight.clone()).collect())
    }

    pub fn embed_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.config.input_dim {
            return Err(FlowerError::ShapeMismatch {
                node: "input".into(),
                expected: vec![self.config.input_dim],
                got: g.shape(x).to_vec(),
            });
        }
        let h = self.feature.forward_var(g, x)?;
        self.head.forward_var(g, h)
    }

    /// `g(f(x))` for a `[n, input_dim]` batch.
    pub fn embed(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        g.bind(params)?;
        let xv = g.constant(as_matrix(x));
        let z = self.embed_var(&mut g, xv)?;
        Ok(g.value(z).clone())
    }
}

fn as_matrix(x: &Tensor) -> Tensor {
    if x.rank() == 1 {
        Tensor::from_parts(vec![1, x.len()], x.data().to_vec())
    } else {
        x.clone()
    }
}

/// Prototype per class, kept in class-id order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTable {
    dim: usize,
    entries: BTreeMap<ClassId, Vec<f64>>,
}

impl PrototypeTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, class: ClassId, prototype: Vec<f64>) -> Result<()> {
        if prototype.len() != self.dim {
            return Err(FlowerError::ShapeMismatch {
                node: format!("prototype {class}"),
                expected: vec![self.dim],
                got: vec![prototype.len()],
            });
        }
        if self.entries.contains_key(&class) {
            return Err(FlowerError::DuplicateClass(class));
        }
        self.entries.insert(class, prototype);
        Ok(())
    }

    /// Adds every class of `other`; fails without modification on any overlap.
    pub fn extend(&mut self, other: &PrototypeTable) -> Result<()> {
        let overlap: Vec<ClassId> = other.entries.keys().filter(|c| self.entries.contains_key(c)).copied().collect();
        if !overlap.is_empty() {
            return Err(FlowerError::ClassOverlap(overlap));
        }
        for (c, p) in &other.entries {
            self.insert(*c, p.clone())?;
        }
        Ok(())
    }

    pub fn get(&self, class: ClassId) -> Option<&[f64]> {
        self.entries.get(&class).map(Vec::as_slice)
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.entries.contains_key(&class)
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.entries.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &[f64])> {
        self.entries.iter().map(|(c, p)| (*c, p.as_slice()))
    }

    pub fn index_of(&self, class: ClassId) -> Option<usize> {
        self.entries.keys().position(|c| *c == class)
    }

    /// `[M, dim]` matrix in class-id order.
    pub fn matrix(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.entries.values().collect::<Vec<_>>())
    }
}

/// Mean embedding per class present in `labels`.
pub fn prototypes_from_embeddings(emb: &Tensor, labels: &[ClassId]) -> Result<PrototypeTable> {
    if labels.is_empty() || emb.rows() != labels.len() {
        return Err(FlowerError::Precondition(format!(
            "{} embeddings for {} labels",
            emb.rows(),
            labels.len()
        )));
    }
    let d = emb.cols();
    let mut sums: BTreeMap<ClassId, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        let e = sums.entry(c).or_insert_with(|| (vec![0.0; d], 0));
        for (acc, v) in e.0.iter_mut().zip(emb.row(i)) {
            *acc += v;
        }
        e.1 += 1;
    }
    let mut table = PrototypeTable::new(d);
    for (c, (s, n)) in sums {
        table.insert(c, s.into_iter().map(|v| v / n as f64).collect())?;
    }
    Ok(table)
}

/// Prototypes of every class in the batch.
pub fn compute_prototypes(net: &ProtoNet, params: &ParamSet, batch: &LabeledBatch) -> Result<PrototypeTable> {
    if batch.is_empty() {
        return Err(FlowerError::Precondition("cannot compute prototypes of an empty batch".into()));
    }
    let emb = net.embed(params, &batch.x)?;
    prototypes_from_embeddings(&emb, &batch.labels)
}

/// Like [`compute_prototypes`] but requires every class of `classes` to appear.
pub fn compute_prototypes_for(
    net: &ProtoNet,
    params: &ParamSet,
    batch: &LabeledBatch,
    classes: &[ClassId],
) -> Result<PrototypeTable> {
    if let Some(&missing) = classes.iter().find(|c| !batch.labels.contains(c)) {
        return Err(FlowerError::EmptyClass(missing));
    }
    compute_prototypes(net, params, batch)
}

fn distances(table: &PrototypeTable, z: &[f64], mode: DistanceMode) -> Result<Vec<f64>> {
    if table.is_empty() {
        return Err(FlowerError::Precondition("prototype table is empty".into()));
    }
    if z.len() != table.dim() {
        return Err(FlowerError::ShapeMismatch {
            node: "embedding".into(),
            expected: vec![table.dim()],
            got: vec![z.len()],
        });
    }
    Ok(table.iter().map(|(_, p)| mode.eval(z, p)).collect())
}

/// Softmax over negative distances to every prototype, in class-id order.
pub fn class_posterior(table: &PrototypeTable, z: &[f64], mode: DistanceMode) -> Result<Vec<f64>> {
    let d = distances(table, z, mode)?;
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = d.iter().map(|v| (min - v).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / s).collect())
}

/// Nearest prototype; exact ties go to the smallest class id.
pub fn nearest_class(table: &PrototypeTable, z: &[f64], mode: DistanceMode) -> Result<ClassId> {
    let d = distances(table, z, mode)?;
    let mut best = 0;
    for (i, v) in d.iter().enumerate() {
        if *v < d[best] {
            best = i;
        }
    }
    Ok(table.classes()[best])
}

/// Mean over the batch of `−log P(y | z)`.
pub fn proto_ce_loss(table: &PrototypeTable, emb: &Tensor, labels: &[ClassId], mode: DistanceMode) -> Result<f64> {
    if emb.rows() != labels.len() || labels.is_empty() {
        return Err(FlowerError::Precondition("embedding/label count mismatch".into()));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let k = table.index_of(y).ok_or(FlowerError::UnknownClass(y))?;
        let d = distances(table, emb.row(i), mode)?;
        let logits: Vec<f64> = d.iter().map(|v| -v).collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - logits[k];
    }
    Ok(total / labels.len() as f64)
}

/// `KL(p ‖ uniform) = log M − H(p)`, with `0·log 0 = 0`.
pub fn kl_to_uniform(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(FlowerError::Precondition("empty probability vector".into()));
    }
    if p.iter().any(|v| !(*v >= 0.0)) {
        return Err(FlowerError::Precondition("probabilities must be non-negative".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(FlowerError::NotNormalized(s));
    }
    let log_m = (p.len() as f64).ln();
    let kl: f64 = p.iter().filter(|v| **v > 0.0).map(|v| v * (v.ln() + log_m)).sum();
    // Rounding can leave the sum a few ulps outside the exact range.
    Ok(kl.clamp(0.0, log_m))
}

/// `[C, n]` matrix whose row `c` averages the samples of `classes[c]`.
pub fn averaging_matrix(labels: &[ClassId], classes: &[ClassId]) -> Result<Tensor> {
    let n = labels.len();
    let mut data = vec![0.0; classes.len() * n];
    for (ci, c) in classes.iter().enumerate() {
        let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == *c).collect();
        if idx.is_empty() {
            return Err(FlowerError::EmptyClass(*c));
        }
        let w = 1.0 / idx.len() as f64;
        for i in idx {
            data[ci * n + i] = w;
        }
    }
    Tensor::matrix(classes.len(), n, data)
}

/// Differentiable prototypes of the classes in `labels`, in class-id order.
pub fn prototypes_var(g: &mut Graph, z: Var, labels: &[ClassId]) -> Result<(Var, Vec<ClassId>)> {
    let mut classes: Vec<ClassId> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let avg = g.constant(averaging_matrix(labels, &classes)?);
    Ok((g.matmul(avg, z)?, classes))
}

/// Logits `−d(z_i, p_c)`, shape `[n, C]`.
pub fn logits_var(g: &mut Graph, z: Var, protos: Var, mode: DistanceMode) -> Result<Var> {
    let d = g.dist(z, protos, mode.is_squared())?;
    Ok(g.scale(d, -1.0))
}

/// Mean cross-entropy; `targets[i]` is the prototype row of sample `i`.
pub fn ce_loss_var(g: &mut Graph, z: Var, protos: Var, targets: &[usize], mode: DistanceMode) -> Result<Var> {
    let logits = logits_var(g, z, protos, mode)?;
    let lp = g.log_softmax_rows(logits);
    let picked = g.gather(lp, targets.to_vec())?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Per-sample KL of the posterior to uniform, shape `[n]`.
pub fn kl_uniform_rows_var(g: &mut Graph, z: Var, protos: Var, mode: DistanceMode) -> Result<Var> {
    let m = g.value(protos).rows() as f64;
    let logits = logits_var(g, z, protos, mode)?;
    let lp = g.log_softmax_rows(logits);
    let p = g.exp(lp);
    let plp = g.mul(p, lp)?;
    let neg_h = g.sum_rows(plp);
    Ok(g.add_scalar(neg_h, m.ln()))
}

/// Batch mean of [`kl_uniform_rows_var`].
pub fn kl_uniform_var(g: &mut Graph, z: Var, protos: Var, mode: DistanceMode) -> Result<Var> {
    let rows = kl_uniform_rows_var(g, z, protos, mode)?;
    Ok(g.mean(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn table(rows: &[(u32, Vec<f64>)]) -> PrototypeTable {
        let mut t = PrototypeTable::new(rows[0].1.len());
        for (c, p) in rows {
            t.insert(ClassId(*c), p.clone()).unwrap();
        }
        t
    }

    fn identity_net(dim: usize) -> (ProtoNet, ParamSet) {
        let net = ProtoNet::new(ModelConfig {
            input_dim: dim,
            hidden: vec![],
            embedding_dim: dim,
            distance: DistanceMode::Euclidean,
        })
        .unwrap();
        let mut p = ParamSet::new();
        p.insert("head.0.weight", Partition::ClassifierHead, Tensor::identity(dim)).unwrap();
        p.insert("head.0.bias", Partition::ClassifierHead, Tensor::zeros(&[dim])).unwrap();
        (net, p)
    }

    #[test]
    fn identity_embedding() {
        let (net, p) = identity_net(3);
        let x = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(net.embed(&p, &x).unwrap().data(), x.data());
    }

    #[test]
    fn zero_head_gives_zero_embedding() {
        let net = ProtoNet::new(ModelConfig { input_dim: 4, hidden: vec![5], embedding_dim: 3, ..Default::default() })
            .unwrap();
        let mut p = net.init_params(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for id in ["head.0.weight", "head.0.bias"] {
            p.get_mut(id).unwrap().data_mut().fill(0.0);
        }
        let z = net.embed(&p, &Tensor::matrix(2, 4, vec![1.0; 8]).unwrap()).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn embedding_is_deterministic() {
        let net = ProtoNet::new(ModelConfig { input_dim: 4, hidden: vec![6, 6], embedding_dim: 3, ..Default::default() })
            .unwrap();
        let p = net.init_params(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let x = Tensor::matrix(2, 4, vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.5, 0.0]).unwrap();
        let a = net.embed(&p, &x).unwrap();
        let b = net.embed(&p, &x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn embed_rejects_wrong_dim() {
        let (net, p) = identity_net(3);
        assert!(net.embed(&p, &Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).is_err());
    }

    #[test]
    fn prototypes_single_and_symmetric() {
        let (net, p) = identity_net(2);
        let batch = LabeledBatch::new(
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![-3.0, 1.0]]).unwrap(),
            vec![ClassId(0), ClassId(1), ClassId(1)],
        )
        .unwrap();
        let t = compute_prototypes(&net, &p, &batch).unwrap();
        assert_eq!(t.get(ClassId(0)).unwrap(), &[1.0, 2.0]);
        assert_eq!(t.get(ClassId(1)).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn prototypes_match_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let labels = vec![ClassId(2); 5];
        let t = prototypes_from_embeddings(&Tensor::from_rows(&rows).unwrap(), &labels).unwrap();
        for k in 0..4 {
            let mut s = 0.0;
            for r in &rows {
                s += r[k];
            }
            assert!((t.get(ClassId(2)).unwrap()[k] - s / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_class_is_reported() {
        let (net, p) = identity_net(2);
        let batch = LabeledBatch::new(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(), vec![ClassId(0)]).unwrap();
        let err = compute_prototypes_for(&net, &p, &batch, &[ClassId(0), ClassId(4)]).unwrap_err();
        assert!(matches!(err, FlowerError::EmptyClass(ClassId(4))));
    }

    #[test]
    fn equidistant_posterior_is_half() {
        let t = table(&[(0, vec![1.0, 0.0]), (1, vec![-1.0, 0.0])]);
        let p = class_posterior(&t, &[0.0, 3.0], DistanceMode::Euclidean).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn closed_form_posterior() {
        let t = table(&[(1, vec![0.0, 0.0]), (2, vec![10.0, 0.0])]);
        let p = class_posterior(&t, &[0.0, 0.0], DistanceMode::Euclidean).unwrap();
        let expected = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((p[0] - expected).abs() < 1e-12);
        assert!((p[0] - 0.9999546).abs() < 1e-7);
    }

    #[test]
    fn empty_table_rejected() {
        let t = PrototypeTable::new(2);
        assert!(class_posterior(&t, &[0.0, 0.0], DistanceMode::Euclidean).is_err());
    }

    #[test]
    fn tie_goes_to_smallest_class() {
        let t = table(&[(5, vec![1.0]), (3, vec![-1.0])]);
        assert_eq!(nearest_class(&t, &[0.0], DistanceMode::Euclidean).unwrap(), ClassId(3));
    }

    #[test]
    fn ce_near_certain_and_uniform() {
        let t = table(&[(0, vec![0.0]), (1, vec![1000.0])]);
        let emb = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        assert!(proto_ce_loss(&t, &emb, &[ClassId(0)], DistanceMode::Euclidean).unwrap() < 1e-6);

        let t = table(&[(0, vec![1.0]), (1, vec![-1.0])]);
        let emb = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        for y in [0, 1] {
            let l = proto_ce_loss(&t, &emb, &[ClassId(y)], DistanceMode::Euclidean).unwrap();
            assert!((l - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_unknown_label() {
        let t = table(&[(0, vec![0.0])]);
        let emb = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        assert!(matches!(
            proto_ce_loss(&t, &emb, &[ClassId(9)], DistanceMode::Euclidean),
            Err(FlowerError::UnknownClass(ClassId(9)))
        ));
    }

    #[test]
    fn kl_examples() {
        for m in 1..8 {
            let p = vec![1.0 / m as f64; m];
            assert!(kl_to_uniform(&p).unwrap().abs() < 1e-12);
        }
        let kl = kl_to_uniform(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((kl - 4f64.ln()).abs() < 1e-12);
        let kl = kl_to_uniform(&[0.7, 0.3]).unwrap();
        let oracle = 0.7 * 1.4f64.ln() + 0.3 * 0.6f64.ln();
        assert!((kl - oracle).abs() < 1e-12);
        assert!((kl - 0.082282).abs() < 1e-6);
        assert!(matches!(kl_to_uniform(&[0.5, 0.6]), Err(FlowerError::NotNormalized(_))));
    }

    #[test]
    fn tape_ce_matches_value_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let protos: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let emb: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let labels: Vec<ClassId> = (0..6).map(|i| ClassId(i % 3)).collect();
        let t = table(&protos.iter().enumerate().map(|(i, p)| (i as u32, p.clone())).collect::<Vec<_>>());
        let emb_t = Tensor::from_rows(&emb).unwrap();
        for mode in [DistanceMode::Euclidean, DistanceMode::SquaredEuclidean] {
            let value = proto_ce_loss(&t, &emb_t, &labels, mode).unwrap();
            let mut g = Graph::new();
            let z = g.constant(emb_t.clone());
            let p = g.constant(t.matrix().unwrap());
            let targets: Vec<usize> = labels.iter().map(|c| c.0 as usize).collect();
            let l = ce_loss_var(&mut g, z, p, &targets, mode).unwrap();
            assert!((g.value(l).item().unwrap() - value).abs() < 1e-12);

            // Independent oracle: -mean log posterior.
            let mut oracle = 0.0;
            for (i, y) in labels.iter().enumerate() {
                let post = class_posterior(&t, &emb[i], mode).unwrap();
                oracle -= post[y.0 as usize].ln();
            }
            assert!((value - oracle / 6.0).abs() < 1e-12);
        }
    }
}
