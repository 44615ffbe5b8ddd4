//! Synthetic client populations and the exact target-population optimum.
//!
//! Client `i` draws covariates `z ~ N(0, I)`, features `x ~ N(0, I)` and
//! labels `y ~ Bernoulli(sigmoid(⟨θ_base + Γ z, x⟩))`, so the same covariates
//! that later drive selection also shift the local data distribution.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::{axpy, dot, logistic, norm2, solve_spd, RowMatrix};
use crate::objective::{LocalObjective, LogisticClient};
use crate::rng::{Purpose, StreamKey};
use crate::{Error, Result};

pub const DEFAULT_RIDGE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    pub num_clients: usize,
    pub covariate_dim: usize,
    pub feature_dim: usize,
    pub samples_per_client: usize,
    pub base_param: Vec<f64>,
    /// `feature_dim x covariate_dim`
    pub heterogeneity: RowMatrix,
    pub ridge: f64,
    pub master_seed: u64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        let heterogeneity = RowMatrix::from_rows(&[
            [1.0, 0.0],
            [0.0, 1.0],
            [0.5, 0.5],
            [0.0, 0.0],
            [0.0, 0.0],
        ])
        .expect("static shape");
        Self {
            num_clients: 400,
            covariate_dim: 2,
            feature_dim: 5,
            samples_per_client: 200,
            base_param: vec![0.5, -0.5, 0.25, 0.0, 0.0],
            heterogeneity,
            ridge: DEFAULT_RIDGE,
            master_seed: 0,
        }
    }
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        if self.num_clients == 0 {
            return fail("num_clients must be at least 1");
        }
        if self.covariate_dim == 0 || self.feature_dim == 0 {
            return fail("covariate_dim and feature_dim must be positive");
        }
        if self.samples_per_client == 0 {
            return fail("samples_per_client must be at least 1");
        }
        if !(self.ridge > 0.0 && self.ridge.is_finite()) {
            return fail("ridge must be positive");
        }
        if self.base_param.len() != self.feature_dim {
            return Err(Error::Config(format!(
                "base_param has length {}, expected feature_dim = {}",
                self.base_param.len(),
                self.feature_dim
            )));
        }
        if self.heterogeneity.rows() != self.feature_dim
            || self.heterogeneity.cols() != self.covariate_dim
        {
            return Err(Error::Config(format!(
                "heterogeneity is {}x{}, expected {}x{}",
                self.heterogeneity.rows(),
                self.heterogeneity.cols(),
                self.feature_dim,
                self.covariate_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRecord {
    pub id: usize,
    /// Pre-enrollment covariates.
    pub z: Vec<f64>,
    /// `n x m`
    pub features: RowMatrix,
    pub labels: Vec<bool>,
    /// `θ_base + Γ z`
    pub data_param: Vec<f64>,
}

impl ClientRecord {
    pub fn objective(&self, ridge: f64) -> LogisticClient<'_> {
        LogisticClient::new(self, ridge)
    }
}

fn normal_vec<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn generate_population(spec: &PopulationSpec) -> Result<Vec<ClientRecord>> {
    spec.validate()?;
    let seed = spec.master_seed;
    let (m, n) = (spec.feature_dim, spec.samples_per_client);
    let clients = (0..spec.num_clients)
        .map(|id| {
            let z = normal_vec(
                &mut StreamKey::new(seed, Purpose::Covariates).client(id).rng(),
                spec.covariate_dim,
            );
            let mut data_param = spec.base_param.clone();
            axpy(1.0, &spec.heterogeneity.mul_vec(&z), &mut data_param);

            let mut feat_rng = StreamKey::new(seed, Purpose::Features).client(id).rng();
            let features = RowMatrix::from_vec(n, m, normal_vec(&mut feat_rng, n * m))
                .expect("sized above");

            let mut label_rng = StreamKey::new(seed, Purpose::Labels).client(id).rng();
            let labels = features
                .iter_rows()
                .map(|x| label_rng.random_bool(logistic(dot(&data_param, x))))
                .collect();

            ClientRecord {
                id,
                z,
                features,
                labels,
                data_param,
            }
        })
        .collect();
    Ok(clients)
}

fn check_dim(client: &ClientRecord, theta: &[f64]) -> Result<()> {
    if theta.len() != client.features.cols() {
        return Err(Error::Dimension {
            expected: client.features.cols(),
            actual: theta.len(),
        });
    }
    Ok(())
}

/// `(1/n) Σ_j [log(1 + e^{s_j}) − y_j s_j] + (λ/2)‖θ‖²`
pub fn client_loss(client: &ClientRecord, theta: &[f64], ridge: f64) -> Result<f64> {
    check_dim(client, theta)?;
    Ok(client.objective(ridge).loss(theta))
}

/// `(1/n) Σ_j (sigmoid(s_j) − y_j) x_j + λθ`
pub fn client_gradient(client: &ClientRecord, theta: &[f64], ridge: f64) -> Result<Vec<f64>> {
    check_dim(client, theta)?;
    Ok(client.objective(ridge).gradient(theta))
}

/// `F(θ)`: mean client loss, summed in ascending client order.
pub fn population_objective(pop: &[ClientRecord], theta: &[f64], ridge: f64) -> Result<f64> {
    if pop.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    let mut total = 0.0;
    for c in pop {
        total += client_loss(c, theta, ridge)?;
    }
    Ok(total / pop.len() as f64)
}

pub fn population_gradient(pop: &[ClientRecord], theta: &[f64], ridge: f64) -> Result<Vec<f64>> {
    if pop.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    let mut g = vec![0.0; theta.len()];
    let w = 1.0 / pop.len() as f64;
    for c in pop {
        axpy(w, &client_gradient(c, theta, ridge)?, &mut g);
    }
    Ok(g)
}

/// Gradient and row-major Hessian of `F` in one pass.
fn gradient_and_hessian(pop: &[ClientRecord], theta: &[f64], ridge: f64) -> (Vec<f64>, Vec<f64>) {
    let m = theta.len();
    let mut g = vec![0.0; m];
    let mut h = vec![0.0; m * m];
    let n_clients = pop.len() as f64;
    for c in pop {
        let w = 1.0 / (n_clients * c.labels.len() as f64);
        for (x, &y) in c.features.iter_rows().zip(&c.labels) {
            let p = logistic(dot(theta, x));
            let r = p - if y { 1.0 } else { 0.0 };
            axpy(w * r, x, &mut g);
            let curv = w * p * (1.0 - p);
            for a in 0..m {
                let ca = curv * x[a];
                for b in a..m {
                    h[a * m + b] += ca * x[b];
                }
            }
        }
    }
    axpy(ridge, theta, &mut g);
    for a in 0..m {
        h[a * m + a] += ridge;
        for b in 0..a {
            h[a * m + b] = h[b * m + a];
        }
    }
    (g, h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub theta_star: Vec<f64>,
    pub f_star: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const NEWTON_LOCAL: f64 = 1e-10;

/// Damped Newton with Armijo backtracking on the population objective.
pub fn solve_target_optimum(
    pop: &[ClientRecord],
    ridge: f64,
    tol: f64,
    max_iter: usize,
) -> Result<OracleSolution> {
    if pop.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    if !(ridge > 0.0) {
        return Err(Error::Config("target optimum needs ridge > 0".into()));
    }
    let m = pop[0].features.cols();
    let mut theta = vec![0.0; m];
    let mut f = population_objective(pop, &theta, ridge)?;
    let mut grad_norm = f64::INFINITY;
    for it in 0..=max_iter {
        let (g, h) = gradient_and_hessian(pop, &theta, ridge);
        grad_norm = norm2(&g);
        if grad_norm < tol {
            return Ok(OracleSolution {
                theta_star: theta,
                f_star: f,
                grad_norm,
                iterations: it,
            });
        }
        if it == max_iter {
            break;
        }
        let step = solve_spd(m, &h, &g)?;
        let decrement = dot(&g, &step);
        let mut t = 1.0;
        // Inside the quadratic region the Armijo test only sees rounding
        // noise in `F`, so the full step is taken unconditionally.
        let mut accepted = false;
        let line_search = decrement > NEWTON_LOCAL * (1.0 + f.abs());
        for _ in 0..if line_search { 60 } else { 0 } {
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            let fc = population_objective(pop, &cand, ridge)?;
            if fc <= f - ARMIJO_C * t * decrement {
                theta = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= BACKTRACK;
        }
        if !accepted {
            for (a, s) in theta.iter_mut().zip(&step) {
                *a -= s;
            }
            f = population_objective(pop, &theta, ridge)?;
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        grad_norm,
        last_iterate: theta,
    })
}
