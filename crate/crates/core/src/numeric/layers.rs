//! Parameter containers shared by the vision, encoder and decoder stacks.

use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::Result;

pub type NamedParams = Vec<(String, Tensor)>;

/// Anything owning trainable tensors. Names are dot-separated paths and
/// define checkpoint order.
pub trait Parameters {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams);

    fn named_parameters(&self) -> NamedParams {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    fn num_parameters(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b`, with `W` stored `[in x out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
    pub fn new(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        let b = (0..fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        Linear {
            weight: Tensor::param(&[fan_in, fan_out], w).unwrap(),
            bias: Tensor::param(&[fan_out], b).unwrap(),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::param(&[fan_in, fan_out], vec![0.0; fan_in * fan_out]).unwrap(),
            bias: Tensor::param(&[fan_out], vec![0.0; fan_out]).unwrap(),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_bias(&self.bias)
    }
}

impl Parameters for Linear {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::param(&[d], vec![1.0; d]).unwrap(),
            beta: Tensor::param(&[d], vec![0.0; d]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

impl Parameters for LayerNorm {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
    }
}

/// A `[rows x d]` table initialised Normal(0, 0.02).
/// Table shared with an output projection: unit-scale logits from the start.
pub fn tied_embedding_table(rng: &mut Rng, rows: usize, d: usize) -> Tensor {
    let std = 1.0 / (d as f64).sqrt();
    let data = (0..rows * d).map(|_| rng.normal(0.0, std)).collect();
    Tensor::param(&[rows, d], data).unwrap()
}

pub fn embedding_table(rng: &mut Rng, rows: usize, d: usize) -> Tensor {
    let data = (0..rows * d).map(|_| rng.normal(0.0, 0.02)).collect();
    Tensor::param(&[rows, d], data).unwrap()
}

impl Tensor {
    /// Inverted dropout. A no-op when `rng` is `None` or `rate == 0`.
    pub fn dropout(&self, rate: f64, rng: Option<&mut Rng>) -> Result<Tensor> {
        match rng {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let mask = (0..self.numel())
                    .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                    .collect();
                self.mul(&Tensor::new(self.shape(), mask)?)
            }
            _ => Ok(self.clone()),
        }
    }
}

/// Sets every parameter of `module` to zero.
pub fn zero_all(module: &impl Parameters) {
    for p in module.parameters() {
        p.set_data(vec![0.0; p.numel()]).unwrap();
    }
}
