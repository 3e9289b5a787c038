use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Graph, ParamSet, Partition, Tensor, Var};
use crate::error::{FlowerError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

/// One fully connected layer: `act(x @ W + b)` with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub weight: String,
    pub bias: String,
    pub activation: Activation,
}

/// Graph description for a stack of fully connected layers.
///
/// With `residual` set the input is added to the output, which requires equal
/// input and output widths. An `Mlp` with no layers is the identity.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Mlp {
    pub layers: Vec<LayerSpec>,
    pub residual: bool,
}

impl Mlp {
    /// Layers named `{prefix}.{i}.weight` / `{prefix}.{i}.bias`; ReLU on every
    /// layer except the last, which uses `last`.
    pub fn chain(prefix: &str, n_layers: usize, last: Activation) -> Self {
        let layers = (0..n_layers)
            .map(|i| LayerSpec {
                weight: format!("{prefix}.{i}.weight"),
                bias: format!("{prefix}.{i}.bias"),
                activation: if i + 1 == n_layers { last } else { Activation::Relu },
            })
            .collect();
        Self { layers, residual: false }
    }

    /// Adds He-normal weights and zero biases for `dims = [in, h1, ..., out]`.
    pub fn init_params<R: Rng + ?Sized>(
        &self,
        dims: &[usize],
        partition: Partition,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<()> {
        if dims.len() != self.layers.len() + 1 {
            return Err(FlowerError::Precondition(format!(
                "{} layers need {} widths, got {}",
                self.layers.len(),
                self.layers.len() + 1,
                dims.len()
            )));
        }
        for (layer, w) in self.layers.iter().zip(dims.windows(2)) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
            params.insert(&layer.weight, partition, Tensor::matrix(fan_in, fan_out, data)?)?;
            params.insert(&layer.bias, partition, Tensor::zeros(&[fan_out]))?;
        }
        Ok(())
    }

    /// Records the forward pass on `g`; parameters must already be bound.
    pub fn forward_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let input = x;
        let mut h = x;
        for layer in &self.layers {
            let w = g.param(&layer.weight)?;
            let b = g.param(&layer.bias)?;
            let (ws, hs) = (g.shape(w).to_vec(), g.shape(h).to_vec());
            if ws.len() != 2 || hs.len() != 2 || hs[1] != ws[0] {
                return Err(FlowerError::ShapeMismatch {
                    node: layer.weight.clone(),
                    expected: vec![hs.first().copied().unwrap_or(0), ws.first().copied().unwrap_or(0)],
                    got: hs,
                });
            }
            let z = g.matmul(h, w)?;
            let z = g.add_row(z, b).map_err(|_| FlowerError::ShapeMismatch {
                node: layer.bias.clone(),
                expected: vec![ws[1]],
                got: g.shape(b).to_vec(),
            })?;
            h = match layer.activation {
                Activation::Identity => z,
                Activation::Relu => g.relu(z),
            };
        }
        if self.residual && !self.layers.is_empty() {
            h = g.add(h, input).map_err(|_| FlowerError::ShapeMismatch {
                node: "residual".into(),
                expected: g.shape(input).to_vec(),
                got: g.shape(h).to_vec(),
            })?;
        }
        Ok(h)
    }

    /// Evaluates the network on a `[n, in]` batch (or a single `[in]` vector).
    pub fn forward(&self, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        for layer in &self.layers {
            for id in [&layer.weight, &layer.bias] {
                if !params.contains(id) {
                    return Err(FlowerError::UnknownParam(id.clone()));
                }
            }
        }
        g.bind(params)?;
        let x = if input.rank() == 1 {
            g.constant(Tensor::from_parts(vec![1, input.len()], input.data().to_vec()))
        } else {
            g.constant(input.clone())
        };
        let y = self.forward_var(&mut g, x)?;
        let out = g.value(y).clone();
        if input.rank() == 1 {
            let n = out.len();
            return Tensor::new(vec![n], out.into_data());
        }
        Ok(out)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = &str> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_str(), l.bias.as_str()])
    }
}
