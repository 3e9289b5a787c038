//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! nodes in reverse and accumulates vector-Jacobian products. The graph is
//! rebuilt for every evaluation; nothing is cached between batches.

use std::collections::BTreeMap;

use super::{GradMap, ParamSet, Tensor};
use crate::error::{FlowerError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `[m,k] @ [k,n]`
    MatMul(Var, Var),
    /// `x[n,m] + b[m]` broadcast over rows
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `x * s` with `s` a scalar node
    MulScalar(Var, Var),
    Relu(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    /// `[n,m] -> [n]`
    SumRows(Var),
    /// Scalar max over all entries; gradient goes to the first argmax.
    Max(Var),
    /// `[n,d] -> [n]` Euclidean row norms.
    RowNorm(Var),
    /// `[n,d] x [c,d] -> [n,c]`
    Dist { a: Var, b: Var, squared: bool },
    LogSoftmaxRows(Var),
    /// `[n,c] -> [n]`, picks `x[i, idx[i]]`
    Gather(Var, Vec<usize>),
    /// `[n,d] -> [k,d]`
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn mismatch(node: &str, expected: &[usize], got: &[usize]) -> FlowerError {
    FlowerError::ShapeMismatch {
        node: node.to_string(),
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; receives a gradient but is not reported by [`Graph::gradients`].
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Copy of `v`'s value as a new constant; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Registers every parameter of `params` as a trainable leaf.
    pub fn bind(&mut self, params: &ParamSet) -> Result<()> {
        for (id, p) in params.iter() {
            if self.params.contains_key(id) {
                return Err(FlowerError::DuplicateParam(id.to_string()));
            }
            let v = self.push(p.value.clone(), Op::Leaf);
            self.params.insert(id.to_string(), v);
        }
        Ok(())
    }

    pub fn param(&self, id: &str) -> Result<Var> {
        self.params
            .get(id)
            .copied()
            .ok_or_else(|| FlowerError::UnknownParam(id.to_string()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sb, &sa));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let m = self.value(x).cols();
        if self.value(b).len() != m {
            return Err(mismatch("add_row", &[m], self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(m) {
            for (v, bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        Ok(self.push(Tensor::from_parts(sx, data), Op::AddRow(x, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v + c);
        self.push(t, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item().map_err(|_| mismatch("mul_scalar", &[1], self.shape(s)))?;
        let t = self.value(a).map(|v| v * sv);
        Ok(self.push(t, Op::MulScalar(a, s)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(t, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        // Mul(a, a) accumulates both operand paths, giving 2a.
        self.mul(a, a).expect("identical shapes")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        let data = (0..n).map(|i| t.data()[i * m..(i + 1) * m].iter().sum()).collect();
        self.push(Tensor::from_parts(vec![n], data), Op::SumRows(a))
    }

    pub fn max(&mut self, a: Var) -> Var {
        let m = self
            .value(a)
            .data()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        self.push(Tensor::scalar(m), Op::Max(a))
    }

    pub fn row_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, d) = (t.rows(), t.cols());
        let data = (0..n)
            .map(|i| t.data()[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.push(Tensor::from_parts(vec![n], data), Op::RowNorm(a))
    }

    /// Pairwise distances between rows of `a` and rows of `b`.
    pub fn dist(&mut self, a: Var, b: Var, squared: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(mismatch("dist", &[tb.cols()], &[ta.cols()]));
        }
        let (n, c, d) = (ta.rows(), tb.rows(), ta.cols());
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            let ai = &ta.data()[i * d..(i + 1) * d];
            for j in 0..c {
                let bj = &tb.data()[j * d..(j + 1) * d];
                let s: f64 = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
                out.push(if squared { s } else { s.sqrt() });
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::Dist { a, b, squared }))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = &t.data()[i * m..(i + 1) * m];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmaxRows(a))
    }

    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        if idx.len() != n || idx.iter().any(|&j| j >= m) {
            return Err(mismatch("gather", &[n], &[idx.len()]));
        }
        let data = idx.iter().enumerate().map(|(i, &j)| t.data()[i * m + j]).collect();
        Ok(self.push(Tensor::from_parts(vec![n], data), Op::Gather(a, idx)))
    }

    pub fn select_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a).select_rows(&idx)?;
        Ok(self.push(t, Op::SelectRows(a, idx)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(FlowerError::InvalidTensor("concat of nothing".into()));
        };
        let d = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != d {
                return Err(mismatch("concat_rows", &[d], &[t.cols()]));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::from_parts(vec![rows, d], data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = Tensor::new(shape, self.value(a).data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(FlowerError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let gd = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ta.data()[i * k + p];
                            let mut acc = 0.0;
                            for j in 0..n {
                                let gij = gd[i * n + j];
                                acc += gij * tb.data()[p * n + j];
                                db[p * n + j] += aip * gij;
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    add_grad(&mut grads, *a, ta.shape(), da);
                    add_grad(&mut grads, *b, tb.shape(), db);
                }
                Op::AddRow(x, b) => {
                    let m = self.value(*x).cols();
                    let mut db = vec![0.0; m];
                    for row in gd.chunks(m) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    add_grad(&mut grads, *x, g.shape(), gd.to_vec());
                    add_grad(&mut grads, *b, self.shape(*b), db);
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads, *a, g.shape(), gd.to_vec());
                    add_grad(&mut grads, *b, g.shape(), gd.to_vec());
                }
                Op::Sub(a, b) => {
                    add_grad(&mut grads, *a, g.shape(), gd.to_vec());
                    add_grad(&mut grads, *b, g.shape(), gd.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                    let da = gd.iter().zip(tb).map(|(g, y)| g * y).collect();
                    let db = gd.iter().zip(ta).map(|(g, x)| g * x).collect();
                    add_grad(&mut grads, *a, g.shape(), da);
                    add_grad(&mut grads, *b, g.shape(), db);
                }
                Op::Scale(a, c) => {
                    add_grad(&mut grads, *a, g.shape(), gd.iter().map(|v| v * c).collect());
                }
                Op::AddScalar(a) => {
                    add_grad(&mut grads, *a, g.shape(), gd.to_vec());
                }
                Op::MulScalar(a, s) => {
                    let sv = self.value(*s).data()[0];
                    let ta = self.value(*a).data();
                    let ds: f64 = gd.iter().zip(ta).map(|(g, x)| g * x).sum();
                    add_grad(&mut grads, *a, g.shape(), gd.iter().map(|v| v * sv).collect());
                    add_grad(&mut grads, *s, self.shape(*s), vec![ds]);
                }
                Op::Relu(a) => {
                    let ta = self.value(*a).data();
                    let da = gd.iter().zip(ta).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                    add_grad(&mut grads, *a, g.shape(), da);
                }
                Op::Exp(a) => {
                    let out = node.value.data();
                    let da = gd.iter().zip(out).map(|(g, y)| g * y).collect();
                    add_grad(&mut grads, *a, g.shape(), da);
                }
                Op::Sum(a) => {
                    let ta = self.value(*a);
                    add_grad(&mut grads, *a, ta.shape(), vec![gd[0]; ta.len()]);
                }
                Op::Mean(a) => {
                    let ta = self.value(*a);
                    add_grad(&mut grads, *a, ta.shape(), vec![gd[0] / ta.len() as f64; ta.len()]);
                }
                Op::SumRows(a) => {
                    let ta = self.value(*a);
                    let m = ta.cols();
                    let da = (0..ta.len()).map(|i| gd[i / m]).collect();
                    add_grad(&mut grads, *a, ta.shape(), da);
                }
                Op::Max(a) => {
                    let ta = self.value(*a);
                    let mx = node.value.data()[0];
                    let mut da = vec![0.0; ta.len()];
                    if let Some(pos) = ta.data().iter().position(|&v| v == mx) {
                        da[pos] = gd[0];
                    }
                    add_grad(&mut grads, *a, ta.shape(), da);
                }
                Op::RowNorm(a) => {
                    let ta = self.value(*a);
                    let d = ta.cols();
                    let norms = node.value.data();
                    let mut da = vec![0.0; ta.len()];
                    for i in 0..ta.rows() {
                        if norms[i] > 0.0 {
                            let f = gd[i] / norms[i];
                            for k in 0..d {
                                da[i * d + k] = f * ta.data()[i * d + k];
                            }
                        }
                    }
                    add_grad(&mut grads, *a, ta.shape(), da);
                }
                Op::Dist { a, b, squared } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, c, d) = (ta.rows(), tb.rows(), ta.cols());
                    let out = node.value.data();
                    let mut da = vec![0.0; ta.len()];
                    let mut db = vec![0.0; tb.len()];
                    for i in 0..n {
                        for j in 0..c {
                            let gij = gd[i * c + j];
                            let f = if *squared {
                                2.0 * gij
                            } else if out[i * c + j] > 0.0 {
                                gij / out[i * c + j]
                            } else {
                                0.0
                            };
                            if f == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                let diff = ta.data()[i * d + k] - tb.data()[j * d + k];
                                da[i * d + k] += f * diff;
                                db[j * d + k] -= f * diff;
                            }
                        }
                    }
                    add_grad(&mut grads, *a, ta.shape(), da);
                    add_grad(&mut grads, *b, tb.shape(), db);
                }
                Op::LogSoftmaxRows(a) => {
                    let out = node.value.data();
                    let m = node.value.cols();
                    let mut da = vec![0.0; out.len()];
                    for i in 0..node.value.rows() {
                        let gs: f64 = gd[i * m..(i + 1) * m].iter().sum();
                        for j in 0..m {
                            da[i * m + j] = gd[i * m + j] - out[i * m + j].exp() * gs;
                        }
                    }
                    add_grad(&mut grads, *a, node.value.shape(), da);
                }
                Op::Gather(a, idx) => {
                    let ta = self.value(*a);
                    let m = ta.cols();
                    let mut da = vec![0.0; ta.len()];
                    for (i, &j) in idx.iter().enumerate() {
                        da[i * m + j] += gd[i];
                    }
                    add_grad(&mut grads, *a, ta.shape(), da);
                }
                Op::SelectRows(a, idx) => {
                    let ta = self.value(*a);
                    let d = ta.cols();
                    let mut da = vec![0.0; ta.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for k in 0..d {
                            da[i * d + k] += gd[r * d + k];
                        }
                    }
                    add_grad(&mut grads, *a, ta.shape(), da);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let tp = self.value(*p);
                        let n = tp.len();
                        add_grad(&mut grads, *p, tp.shape(), gd[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::Reshape(a) => {
                    add_grad(&mut grads, *a, self.shape(*a), gd.to_vec());
                }
            }
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Gradient of `loss` for every parameter in `params`. Parameters that are
    /// not bound or not on a path to the loss get exact zeros.
    pub fn gradients(&self, loss: Var, params: &ParamSet) -> Result<GradMap> {
        let all = self.backward(loss)?;
        let mut out = GradMap::new();
        for (id, p) in params.iter() {
            let g = self
                .params
                .get(id)
                .and_then(|v| all.get(v.0).cloned().flatten())
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            if g.shape() != p.value.shape() {
                return Err(mismatch(id, p.value.shape(), g.shape()));
            }
            out.insert(id, g);
        }
        Ok(out)
    }
}

fn add_grad(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), d)),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o += aip * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Partition;

    #[test]
    fn linear_derivative() {
        // loss = sum(W x), x = [1, 1], W is 1x2 -> dL/dW = [1, 1]
        let mut params = ParamSet::new();
        params
            .insert("w", Partition::FeatureExtractor, Tensor::matrix(2, 1, vec![0.3, -0.7]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        g.bind(&params).unwrap();
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let w = g.param("w").unwrap();
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y);
        let grads = g.gradients(loss, &params).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut params = ParamSet::new();
        params.insert("w", Partition::FeatureExtractor, Tensor::vector(vec![2.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        g.bind(&params).unwrap();
        let c = g.constant(Tensor::scalar(5.0));
        let loss = g.sum(c);
        let grads = g.gradients(loss, &params).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(c), Err(FlowerError::NonScalarLoss(_))));
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn square_gradient_is_doubled() {
        let mut params = ParamSet::new();
        params.insert("t", Partition::FeatureExtractor, Tensor::vector(vec![3.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        g.bind(&params).unwrap();
        let t = g.param("t").unwrap();
        let sq = g.square(t);
        let loss = g.sum(sq);
        let grads = g.gradients(loss, &params).unwrap();
        assert_eq!(grads.get("t").unwrap().data(), &[6.0]);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap());
        let y = g.log_softmax_rows(x);
        for i in 0..2 {
            let s: f64 = g.value(y).row(i).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dist_at_zero_has_zero_gradient() {
        let mut params = ParamSet::new();
        params.insert("a", Partition::FeatureExtractor, Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        g.bind(&params).unwrap();
        let a = g.param("a").unwrap();
        let b = g.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let d = g.dist(a, b, false).unwrap();
        let loss = g.sum(d);
        let grads = g.gradients(loss, &params).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[0.0, 0.0]);
    }
}
