//! Dense multilayer perceptron with hand-written reverse-mode gradients and
//! an Adam optimizer.
//!
//! Batches are matrices with one sample per row. All arithmetic is `f64`.

use crate::error::{check_dim, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Elu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    a + 1.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layer `z = W x + b`, with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: DMatrix::zeros(output, input),
            bias: DVector::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Parameters of an MLP; the activation is applied after every layer but the
/// last.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

/// Gradients share the parameter layout.
pub type MlpGrads = Vec<Dense>;

/// Intermediate values kept from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }
}

impl MlpParams {
    /// Layer widths `dims[0] -> dims[1] -> ... -> dims[L]`, weights drawn from
    /// `N(0, 2 / (fan_in + fan_out))`, biases zero.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut layer = Dense::zeros(fan_in, fan_out);
                // explicit row-major fill keeps the draw order independent of storage
                for i in 0..fan_out {
                    for j in 0..fan_in {
                        layer.weight[(i, j)] = normal.sample(rng);
                    }
                }
                layer
            })
            .collect();
        Self { layers, activation }
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Self {
        let layers = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Dense::output_dim));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    pub fn forward(&self, batch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_cached(batch)?.output)
    }

    pub fn forward_cached(&self, batch: &DMatrix<f64>) -> Result<ForwardCache> {
        check_dim(self.input_dim(), batch.ncols(), "mlp input width")?;
        let last = self.layers.len().saturating_sub(1);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = batch.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &h * layer.weight.transpose();
            for mut row in z.row_iter_mut() {
                row += layer.bias.transpose();
            }
            let act = if l == last {
                Activation::Identity
            } else {
                self.activation
            };
            let a = z.map(|v| act.apply(v));
            inputs.push(std::mem::replace(&mut h, a));
            pre.push(z);
        }
        Ok(ForwardCache {
            inputs,
            pre,
            output: h,
        })
    }

    /// Gradients of `sum <upstream, output>` with respect to parameters and
    /// inputs.
    pub fn backward(&self, cache: &ForwardCache, upstream: &DMatrix<f64>) -> Result<(MlpGrads, DMatrix<f64>)> {
        check_dim(cache.output.nrows(), upstream.nrows(), "upstream gradient rows")?;
        check_dim(cache.output.ncols(), upstream.ncols(), "upstream gradient columns")?;
        let last = self.layers.len().saturating_sub(1);
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        let mut next_out = cache.output.clone();
        for l in (0..self.layers.len()).rev() {
            let act = if l == last {
                Activation::Identity
            } else {
                self.activation
            };
            let z = &cache.pre[l];
            if act != Activation::Identity {
                delta.zip_zip_apply(z, &next_out, |d, zv, av| *d *= act.derivative(zv, av));
            }
            let input = &cache.inputs[l];
            let weight = delta.transpose() * input;
            let bias = DVector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
            grads.push(Dense { weight, bias });
            delta = &delta * &self.layers[l].weight;
            next_out = input.clone();
        }
        grads.reverse();
        Ok((grads, delta))
    }

    pub fn forward_backward(
        &self,
        batch: &DMatrix<f64>,
        upstream: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, MlpGrads, DMatrix<f64>)> {
        let cache = self.forward_cached(batch)?;
        let (grads, input_grads) = self.backward(&cache, upstream)?;
        Ok((cache.output, grads, input_grads))
    }

    /// Row-major weights then bias, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.num_params(), flat.len(), "flat mlp parameters")?;
        let mut it = flat.iter().copied();
        for layer in &mut self.layers {
            let (rows, cols) = layer.weight.shape();
            for i in 0..rows {
                for j in 0..cols {
                    layer.weight[(i, j)] = it.next().expect("length checked");
                }
            }
            for b in layer.bias.iter_mut() {
                *b = it.next().expect("length checked");
            }
        }
        Ok(())
    }
}

pub fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(Dense::num_params).sum());
    for layer in layers {
        for row in layer.weight.row_iter() {
            out.extend(row.iter());
        }
        out.extend(layer.bias.iter());
    }
    out
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_dim(self.m.len(), params.len(), "adam parameters")?;
        check_dim(self.m.len(), grads.len(), "adam gradients")?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
