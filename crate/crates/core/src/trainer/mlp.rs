//! A small fully connected embedding network: affine layers with ReLU between
//! them and an optional L2 normalization of the output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, NORMALIZE_EPS};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub final_l2_normalize: bool,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            input_dim: 32,
            hidden_dims: vec![64],
            output_dim: 16,
            activation: Activation::Relu,
            final_l2_normalize: true,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid("all layer widths must be positive"));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_dims);
        w.push(self.output_dim);
        w
    }
}

/// Affine layer; `weights` is row-major `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub input_dim: usize,
    pub output_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(input_dim: usize, output_dim: usize) -> Self {
        Layer {
            input_dim,
            output_dim,
            weights: vec![0.0; input_dim * output_dim],
            bias: vec![0.0; output_dim],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.input_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub config: MlpConfig,
    pub layers: Vec<Layer>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Input of each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
    /// Final output before normalization and its norm.
    raw_norm: f64,
    pub output: Embedding,
    pub degenerate: bool,
}

impl Trace {
    /// Smallest |pre-activation| over the hidden units, i.e. the distance to
    /// the nearest ReLU kink.
    pub fn min_relu_margin(&self) -> f64 {
        let hidden = &self.pre[..self.pre.len() - 1];
        hidden
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    /// Which hidden units are active.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.pre[..self.pre.len() - 1]
            .iter()
            .flatten()
            .map(|v| *v > 0.0)
            .collect()
    }
}

/// Parameter gradients laid out like [`Mlp::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(model: &Mlp) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.input_dim, l.output_dim))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&v| v == 0.0)
    }
}

impl Mlp {
    /// Weights and biases drawn uniformly from ±1/√fan_in.
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed);
        let widths = config.widths();
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut layer = Layer::zeros(w[0], w[1]);
                for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                    *v = rng.random_range(-bound..bound);
                }
                layer
            })
            .collect();
        Ok(Mlp { config, layers })
    }

    /// All parameters set to zero.
    pub fn zeroed(config: MlpConfig) -> Result<Self> {
        let mut m = Mlp::new(config)?;
        for l in &mut m.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        Ok(m)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn forward(&self, features: &[f64]) -> Result<Embedding> {
        Ok(self.forward_trace(features)?.output)
    }

    pub fn forward_trace(&self, features: &[f64]) -> Result<Trace> {
        if features.len() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                got: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = features.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&x);
            inputs.push(std::mem::take(&mut x));
            x = if i < last {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
        }
        let raw_norm = crate::embedding::norm(&x);
        let mut degenerate = false;
        if self.config.final_l2_normalize {
            if raw_norm > NORMALIZE_EPS {
                x.iter_mut().for_each(|v| *v /= raw_norm);
            } else {
                degenerate = true;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output"));
        }
        Ok(Trace {
            inputs,
            pre,
            raw_norm,
            output: Embedding::from_trusted(x),
            degenerate,
        })
    }

    /// Backpropagates `grad_output` (∂L/∂embedding) through one traced
    /// forward pass, accumulating into `grads`.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_output: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        if grad_output.len() != self.config.output_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.output_dim,
                got: grad_output.len(),
            });
        }
        let mut delta: Vec<f64> = if self.config.final_l2_normalize {
            if trace.degenerate {
                return Ok(());
            }
            // y = z/‖z‖  ⇒  ∂L/∂z = (g − y (y·g)) / ‖z‖
            let y = trace.output.as_slice();
            let dot: f64 = y.iter().zip(grad_output).map(|(a, b)| a * b).sum();
            y.iter()
                .zip(grad_output)
                .map(|(yi, gi)| (gi - yi * dot) / trace.raw_norm)
                .collect()
        } else {
            grad_output.to_vec()
        };
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                for (d, z) in delta.iter_mut().zip(&trace.pre[i]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &trace.inputs[i];
            let g = &mut grads.layers[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.input_dim..(o + 1) * layer.input_dim];
                for (gw, x) in row.iter_mut().zip(input) {
                    *gw += d * x;
                }
            }
            if i > 0 {
                let mut next = vec![0.0; layer.input_dim];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.input_dim..(o + 1) * layer.input_dim];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += d * w;
                    }
                }
                delta = next;
            }
        }
        Ok(())
    }

    /// Plain SGD: `θ ← θ − lr · ∇θ`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in l.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }

    pub fn embed_all<'a, I>(&self, features: I) -> Result<Vec<Embedding>>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        features.into_iter().map(|f| self.forward(f)).collect()
    }
}
