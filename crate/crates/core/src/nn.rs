//! Multi-layer perceptrons, activations and the positional encoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::{linear_row, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Softplus { beta: f64 },
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Softplus { beta } => softplus(x, beta),
            Activation::Sigmoid => squash(x),
        }
    }

    /// Derivative expressed through the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Softplus { beta } => sigmoid(beta * x),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic output kept strictly inside `(0, 1)` even where `sigmoid`
/// rounds to an endpoint.
#[inline]
pub fn squash(x: f64) -> f64 {
    sigmoid(x).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `ln(sigmoid(x))`, stable for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `ln(1 + e^(beta x)) / beta`.
#[inline]
pub fn softplus(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    (z.max(0.0) + (-z.abs()).exp().ln_1p()) / beta
}

/// Output width of [`positional_encoding`].
pub fn pe_dim(bands: usize) -> usize {
    3 + 6 * bands
}

/// `[p, sin(2^k pi p), cos(2^k pi p) for k in 0..bands]`, per axis.
pub fn positional_encoding(p: &[f64; 3], bands: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(p);
    for k in 0..bands {
        let freq = (1u64 << k) as f64 * std::f64::consts::PI;
        for &x in p {
            out.push((freq * x).sin());
        }
        for &x in p {
            out.push((freq * x).cos());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weight: Tensor,
    /// `1 x out`.
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Stack of fully connected layers, each with its own activation tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// He-uniform hidden layers and a narrower uniform output layer, zero biases.
    pub fn init<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(contract(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let last = l + 1 == n;
                let bound = if last {
                    (1.0 / fan_in as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Layer {
                    weight: Tensor::from_vec(fan_out, fan_in, w).expect("sizes match"),
                    bias: Tensor::zeros(1, fan_out),
                    activation: if last { output } else { hidden },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(contract("an MLP needs at least one layer"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.shape() != (1, layer.out_dim()) {
                return Err(contract(format!("layer {l} bias shape mismatch")));
            }
            if l > 0 && layers[l - 1].out_dim() != layer.in_dim() {
                return Err(contract(format!(
                    "layer {l} expects {} inputs but the previous layer yields {}",
                    layer.in_dim(),
                    layers[l - 1].out_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    /// Sizes `[in, hidden..., out]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.in_dim()];
        s.extend(self.layers.iter().map(Layer::out_dim));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Output for one input row, plus the input to the final layer (the last
    /// hidden activation, or `x` itself for a single-layer MLP).
    pub fn forward_with_hidden(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.in_dim() {
            return Err(contract(format!(
                "MLP expects {} inputs, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        let mut cur = x.to_vec();
        let mut hidden = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            if l + 1 == self.layers.len() {
                hidden = cur.clone();
            }
            let mut out = vec![0.0; layer.out_dim()];
            linear_row(&cur, &layer.weight, layer.bias.data(), &mut out);
            for v in out.iter_mut() {
                *v = layer.activation.apply(*v);
            }
            cur = out;
        }
        Ok((cur, hidden))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_with_hidden(x)?.0)
    }
}
