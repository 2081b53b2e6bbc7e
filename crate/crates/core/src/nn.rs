//! Two-layer rectifier network with a flat parameter vector, shared by the
//! downstream classifier and the uncertainty head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Mlp {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    /// `w1 (n_in x n_hidden) | b1 | w2 (n_hidden x n_out) | b2`, row-major.
    pub params: Vec<f64>,
}

pub(crate) struct Activations {
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

impl Mlp {
    pub fn param_count(n_in: usize, n_hidden: usize, n_out: usize) -> usize {
        n_in * n_hidden + n_hidden + n_hidden * n_out + n_out
    }

    pub fn zeros(n_in: usize, n_hidden: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_hidden,
            n_out,
            params: vec![0.0; Self::param_count(n_in, n_hidden, n_out)],
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init(n_in: usize, n_hidden: usize, n_out: usize, rng: &mut StreamRng) -> Self {
        let mut m = Self::zeros(n_in, n_hidden, n_out);
        let a1 = 1.0 / (n_in as f64).sqrt();
        let a2 = 1.0 / (n_hidden as f64).sqrt();
        let split = n_in * n_hidden + n_hidden;
        for (k, p) in m.params.iter_mut().enumerate() {
            let a = if k < split { a1 } else { a2 };
            *p = rng.random_range(-a..=a);
        }
        m
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.n_in * self.n_hidden;
        let w2 = b1 + self.n_hidden;
        let b2 = w2 + self.n_hidden * self.n_out;
        (b1, w2, b2)
    }

    pub fn forward(&self, x: &[f64]) -> Activations {
        debug_assert_eq!(x.len(), self.n_in);
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let mut hidden = p[b1..w2].to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &p[i * self.n_hidden..(i + 1) * self.n_hidden];
            for (h, w) in hidden.iter_mut().zip(row) {
                *h += xi * w;
            }
        }
        hidden.iter_mut().for_each(|h| *h = h.max(0.0));
        let mut out = p[b2..].to_vec();
        for (j, &hj) in hidden.iter().enumerate() {
            if hj == 0.0 {
                continue;
            }
            let row = &p[w2 + j * self.n_out..w2 + (j + 1) * self.n_out];
            for (o, w) in out.iter_mut().zip(row) {
                *o += hj * w;
            }
        }
        Activations { hidden, out }
    }

    /// Accumulates into `grad` the parameter gradient for one input, given
    /// the gradient of the loss with respect to the pre-activation outputs.
    pub fn backward(&self, x: &[f64], act: &Activations, d_out: &[f64], grad: &mut [f64]) {
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        for (g, d) in grad[b2..].iter_mut().zip(d_out) {
            *g += d;
        }
        let mut d_hidden = vec![0.0; self.n_hidden];
        for (j, &hj) in act.hidden.iter().enumerate() {
            let row = w2 + j * self.n_out;
            let mut acc = 0.0;
            for (k, &d) in d_out.iter().enumerate() {
                grad[row + k] += hj * d;
                acc += p[row + k] * d;
            }
            // Rectifier gate; subgradient 0 at the kink.
            d_hidden[j] = if hj > 0.0 { acc } else { 0.0 };
        }
        for (g, d) in grad[b1..w2].iter_mut().zip(&d_hidden) {
            *g += d;
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &mut grad[i * self.n_hidden..(i + 1) * self.n_hidden];
            for (g, d) in row.iter_mut().zip(&d_hidden) {
                *g += xi * d;
            }
        }
    }

    pub fn step(&mut self, grad: &[f64], lr: f64) {
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

