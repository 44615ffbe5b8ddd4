//! Local objectives seen by a client during local SGD.

use alloc::vec::Vec;

use crate::linalg::{axpy, dot, log1p_exp, logistic};
use crate::synthgen::ClientRecord;

/// A client's local objective `f_i`.
pub trait LocalObjective {
    fn dim(&self) -> usize;

    fn num_samples(&self) -> usize;

    fn loss(&self, theta: &[f64]) -> f64;

    /// Full-batch gradient, written into `out`.
    fn gradient_into(&self, theta: &[f64], out: &mut [f64]);

    /// Gradient estimate from the samples in `batch` (indices may repeat).
    fn batch_gradient_into(&self, theta: &[f64], batch: &[usize], out: &mut [f64]);

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = alloc::vec![0.0; self.dim()];
        self.gradient_into(theta, &mut g);
        g
    }
}

/// Ridge-regularized average logistic loss of one client's dataset.
#[derive(Debug, Clone, Copy)]
pub struct LogisticClient<'a> {
    pub record: &'a ClientRecord,
    pub ridge: f64,
}

impl<'a> LogisticClient<'a> {
    pub fn new(record: &'a ClientRecord, ridge: f64) -> Self {
        Self { record, ridge }
    }

    fn accumulate(&self, theta: &[f64], j: usize, weight: f64, out: &mut [f64]) {
        let x = self.record.features.row(j);
        let y = if self.record.labels[j] { 1.0 } else { 0.0 };
        let r = logistic(dot(theta, x)) - y;
        axpy(weight * r, x, out);
    }
}

impl LocalObjective for LogisticClient<'_> {
    fn dim(&self) -> usize {
        self.record.features.cols()
    }

    fn num_samples(&self) -> usize {
        self.record.labels.len()
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        let n = self.num_samples() as f64;
        let data: f64 = self
            .record
            .features
            .iter_rows()
            .zip(&self.record.labels)
            .map(|(x, &y)| {
                let s = dot(theta, x);
                log1p_exp(s) - if y { s } else { 0.0 }
            })
            .sum();
        data / n + 0.5 * self.ridge * dot(theta, theta)
    }

    fn gradient_into(&self, theta: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let w = 1.0 / self.num_samples() as f64;
        for j in 0..self.num_samples() {
            self.accumulate(theta, j, w, out);
        }
        axpy(self.ridge, theta, out);
    }

    fn batch_gradient_into(&self, theta: &[f64], batch: &[usize], out: &mut [f64]) {
        out.fill(0.0);
        let w = 1.0 / batch.len() as f64;
        for &j in batch {
            self.accumulate(theta, j, w, out);
        }
        axpy(self.ridge, theta, out);
    }
}

/// `f(θ) = (μ/2)‖θ − c‖²` with exact gradients; minibatches are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticClient {
    pub center: Vec<f64>,
    pub curvature: f64,
}

impl QuadraticClient {
    pub fn new(center: Vec<f64>, curvature: f64) -> Self {
        Self { center, curvature }
    }
}

impl LocalObjective for QuadraticClient {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn num_samples(&self) -> usize {
        1
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        let d2: f64 = theta
            .iter()
            .zip(&self.center)
            .map(|(t, c)| (t - c) * (t - c))
            .sum();
        0.5 * self.curvature * d2
    }

    fn gradient_into(&self, theta: &[f64], out: &mut [f64]) {
        for ((o, t), c) in out.iter_mut().zip(theta).zip(&self.center) {
            *o = self.curvature * (t - c);
        }
    }

    fn batch_gradient_into(&self, theta: &[f64], _batch: &[usize], out: &mut [f64]) {
        self.gradient_into(theta, out);
    }
}
