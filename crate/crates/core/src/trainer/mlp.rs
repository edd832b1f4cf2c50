//! Small fully connected tanh networks with hand-written backpropagation.

use super::Encoder;
use crate::error::{LabError, Result};
use crate::matstack::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// `x ↦ W_L tanh(… tanh(W_1 x + b_1) …) + b_L`: tanh on hidden layers, linear
/// output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Mat<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Layer inputs kept for the backward pass; `inputs[l]` feeds layer `l`.
struct Cache {
    inputs: Vec<Mat<f64>>,
    output: Mat<f64>,
}

impl Mlp {
    /// Glorot-normal weights and zero biases for layer widths
    /// `[input, hidden…, output]`.
    pub fn random(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(LabError::domain("an MLP needs at least input and output widths, all positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| LabError::domain(e.to_string()))?;
            weights.push(Mat::from_fn(fan_out, fan_in, |_, _| normal.sample(&mut rng)));
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Mlp { weights, biases })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        let mut net = Mlp::random(widths, 0)?;
        net.weights.iter_mut().for_each(|w| *w = Mat::zeros(w.rows(), w.cols()));
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].rows()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.weights.iter().map(|m| m.rows()));
        w
    }

    fn forward_cached(&self, x: &Mat<f64>) -> Cache {
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut a = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &a;
            for i in 0..z.rows() {
                for j in 0..z.cols() {
                    z[(i, j)] += b[i];
                }
            }
            inputs.push(a);
            a = if l == last { z } else { z.map(f64::tanh) };
        }
        Cache { inputs, output: a }
    }

    /// Outputs for the columns of `x` (`input_dim × B`).
    pub fn forward(&self, x: &Mat<f64>) -> Mat<f64> {
        self.forward_cached(x).output
    }

    /// Parameter gradient of `Σ_b ⟨grad[:, b], net(x[:, b])⟩`, in the layout
    /// of [`Mlp::params`].
    pub fn backward(&self, x: &Mat<f64>, grad: &Mat<f64>) -> Vec<f64> {
        let cache = self.forward_cached(x);
        let mut per_layer = Vec::with_capacity(self.weights.len());
        let mut delta = grad.clone();
        for l in (0..self.weights.len()).rev() {
            let a = &cache.inputs[l];
            let gw = &delta * &a.transpose();
            let gb: Vec<f64> = (0..delta.rows()).map(|i| delta.row(i).iter().sum()).collect();
            per_layer.push((gw, gb));
            if l > 0 {
                let back = &self.weights[l].transpose() * &delta;
                delta = Mat::from_fn(back.rows(), back.cols(), |i, j| back[(i, j)] * (1.0 - a[(i, j)] * a[(i, j)]));
            }
        }
        per_layer
            .into_iter()
            .rev()
            .flat_map(|(gw, gb)| gw.into_vec().into_iter().chain(gb))
            .collect()
    }

    /// Flattened parameters: each layer's row-major weights, then its biases.
    pub fn params(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.as_slice().iter().chain(b).copied())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().zip(&self.biases).map(|(w, b)| w.as_slice().len() + b.len()).sum()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.as_slice().len();
            w.as_mut_slice().copy_from_slice(&p[at..at + n]);
            at += n;
            let m = b.len();
            b.copy_from_slice(&p[at..at + m]);
            at += m;
        }
    }
}

/// MLP applied to one-hot indicators of the discrete states.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    pub net: Mlp,
}

impl MlpEncoder {
    /// Network with widths `[n, hidden…, k]`.
    pub fn random(n: usize, hidden: &[usize], k: usize, seed: u64) -> Result<Self> {
        let mut widths = vec![n];
        widths.extend_from_slice(hidden);
        widths.push(k);
        Ok(MlpEncoder { net: Mlp::random(&widths, seed)? })
    }

    fn one_hot(&self, states: &[usize]) -> Mat<f64> {
        Mat::from_fn(self.domain(), states.len(), |i, b| if states[b] == i { 1.0 } else { 0.0 })
    }
}

impl Encoder for MlpEncoder {
    fn k(&self) -> usize {
        self.net.output_dim()
    }

    fn domain(&self) -> usize {
        self.net.input_dim()
    }

    fn forward(&self, states: &[usize]) -> Mat<f64> {
        self.net.forward(&self.one_hot(states))
    }

    fn backward(&self, states: &[usize], grad: &Mat<f64>) -> Vec<f64> {
        self.net.backward(&self.one_hot(states), grad)
    }

    fn num_params(&self) -> usize {
        self.net.num_params()
    }

    fn params(&self) -> Vec<f64> {
        self.net.params()
    }

    fn set_params(&mut self, p: &[f64]) {
        self.net.set_params(p);
    }
}

/// Max over parameters of `|analytic − numeric|`, divided by the largest
/// numeric gradient entry, for the loss `Σ_b ½ f_bᵀ A f_b + c_bᵀ f_b` with
/// random symmetric `A`, random `c` and random inputs.
pub fn mlp_backprop_check(net: &Mlp, seed: u64) -> f64 {
    const BATCH: usize = 5;
    const STEP: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_in, k) = (net.input_dim(), net.output_dim());
    let x = Mat::from_fn(n_in, BATCH, |_, _| rng.random_range(-1.0..1.0));
    let a0 = Mat::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    let a = (&a0 + &a0.transpose()).scale(0.5);
    let c = Mat::from_fn(k, BATCH, |_, _| rng.random_range(-1.0..1.0));
    let loss = |m: &Mlp| {
        let f = m.forward(&x);
        let af = &a * &f;
        (0..BATCH)
            .map(|b| (0..k).map(|r| f[(r, b)] * (0.5 * af[(r, b)] + c[(r, b)])).sum::<f64>())
            .sum::<f64>()
    };
    let f = net.forward(&x);
    let analytic = net.backward(&x, &(&(&a * &f) + &c));
    let base = net.params();
    let mut probe = net.clone();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + STEP;
        probe.set_params(&p);
        let up = loss(&probe);
        p[i] = base[i] - STEP;
        probe.set_params(&p);
        let down = loss(&probe);
        numeric.push((up - down) / (2.0 * STEP));
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(g, n)| (g - n).abs())
        .fold(0.0, f64::max)
        / scale
}
