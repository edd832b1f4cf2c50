//! Tabular encoder: one weight column per discrete state.

use super::Encoder;
use crate::error::{LabError, Result};
use crate::matstack::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Features are the columns of a `k × n` weight table.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotEncoder {
    pub weight: Mat<f64>,
}

impl OneHotEncoder {
    pub fn new(weight: Mat<f64>) -> Self {
        OneHotEncoder { weight }
    }

    /// Entries drawn i.i.d. from `N(0, scale²)`.
    pub fn random(k: usize, n: usize, scale: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0, scale).map_err(|e| LabError::domain(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(OneHotEncoder::new(Mat::from_fn(k, n, |_, _| normal.sample(&mut rng))))
    }
}

impl Encoder for OneHotEncoder {
    fn k(&self) -> usize {
        self.weight.rows()
    }

    fn domain(&self) -> usize {
        self.weight.cols()
    }

    fn forward(&self, states: &[usize]) -> Mat<f64> {
        Mat::from_fn(self.k(), states.len(), |r, b| self.weight[(r, states[b])])
    }

    fn backward(&self, states: &[usize], grad: &Mat<f64>) -> Vec<f64> {
        let n = self.domain();
        let mut g = vec![0.0; self.k() * n];
        for (b, &s) in states.iter().enumerate() {
            for r in 0..self.k() {
                g[r * n + s] += grad[(r, b)];
            }
        }
        g
    }

    fn num_params(&self) -> usize {
        self.weight.as_slice().len()
    }

    fn params(&self) -> Vec<f64> {
        self.weight.as_slice().to_vec()
    }

    fn set_params(&mut self, p: &[f64]) {
        self.weight.as_mut_slice().copy_from_slice(p);
    }
}
