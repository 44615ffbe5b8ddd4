//! Analytical oracles: exact expectations over participation patterns, the
//! two-client instance on which a residual weight error `ε_w` costs exactly
//! `½ ε_w² G² / μ`, and the finite-horizon bias-floor bound.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::calibration::calibrated_round_update;
use crate::federation::{aggregate_ipw, aggregate_naive, local_update, BatchSize, RoundUpdate, ServerState, TrainingConfig};
use crate::linalg::axpy;
use crate::objective::{LocalObjective, QuadraticClient};
use crate::synthgen::{client_gradient, ClientRecord};
use crate::{Error, Result};

/// `f₁ = (μ/2)(θ − a)²`, `f₂ = (μ/2)(θ + a)²`, misweighted by
/// `ρ = (1 + ε_w, 1 − ε_w)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoClientInstance {
    pub mu: f64,
    pub a: f64,
    pub eps_w: f64,
}

impl TwoClientInstance {
    pub fn new(mu: f64, a: f64, eps_w: f64) -> Result<Self> {
        if !(mu > 0.0) || !(a > 0.0) || !(0.0..=0.5).contains(&eps_w) {
            return Err(Error::Config(
                "two-client instance needs mu > 0, a > 0 and eps_w in [0, 1/2]".into(),
            ));
        }
        Ok(Self { mu, a, eps_w })
    }

    pub fn clients(&self) -> [QuadraticClient; 2] {
        [
            QuadraticClient::new(vec![self.a], self.mu),
            QuadraticClient::new(vec![-self.a], self.mu),
        ]
    }

    pub fn rho(&self) -> [f64; 2] {
        [1.0 + self.eps_w, 1.0 - self.eps_w]
    }

    /// `G² = μ² a²`
    pub fn g_squared(&self) -> f64 {
        self.mu * self.mu * self.a * self.a
    }

    /// Smoothness `L = μ`.
    pub fn smoothness(&self) -> f64 {
        self.mu
    }

    /// Heterogeneity slope `B = 1`.
    pub fn heterogeneity_slope(&self) -> f64 {
        1.0
    }

    /// Unweighted target objective `F = (f₁ + f₂)/2`.
    pub fn target(&self, theta: f64) -> f64 {
        let [c1, c2] = self.clients();
        0.5 * (c1.loss(&[theta]) + c2.loss(&[theta]))
    }

    /// `F_ρ = (ρ₁ f₁ + ρ₂ f₂)/(ρ₁ + ρ₂)`
    pub fn weighted(&self, theta: f64) -> f64 {
        let [c1, c2] = self.clients();
        let [r1, r2] = self.rho();
        (r1 * c1.loss(&[theta]) + r2 * c2.loss(&[theta])) / (r1 + r2)
    }

    /// Enrollment probabilities proportional to `ρ`, normalized to sum to one,
    /// so that omitting enrollment reproduces `F_ρ`.
    pub fn enrollment_probs(&self) -> [f64; 2] {
        let [r1, r2] = self.rho();
        [r1 / 2.0, r2 / 2.0]
    }
}

/// `θ_ρ* = ε_w a`
pub fn two_client_minimizer(instance: &TwoClientInstance) -> f64 {
    instance.eps_w * instance.a
}

/// `F(θ_ρ*) − F* = ½ ε_w² G² / μ`
pub fn two_client_gap(instance: &TwoClientInstance) -> f64 {
    0.5 * instance.eps_w * instance.eps_w * instance.g_squared() / instance.mu
}

/// Problem and algorithm constants entering the bias-floor bound.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryConstants {
    pub smoothness: f64,
    pub mu: f64,
    pub g: f64,
    pub b: f64,
    pub sigma2: f64,
    pub p_min: f64,
    pub local_steps: usize,
    pub server_step_size: f64,
    pub eta_eff: f64,
    pub num_clients: usize,
    pub eps_w: f64,
    /// The bound's unspecified universal constant.
    pub c: f64,
    /// `F(θ₀) − F*`
    pub h0: f64,
}

impl TheoryConstants {
    pub fn kappa(&self) -> f64 {
        self.smoothness / self.mu
    }

    /// `σ²/(K N p_min) + L σ²/(K γ²) + G²/(N p_min)`
    pub fn variance_term(&self) -> f64 {
        let k = self.local_steps as f64;
        let n = self.num_clients as f64;
        let gamma = self.server_step_size;
        self.sigma2 / (k * n * self.p_min)
            + self.smoothness * self.sigma2 / (k * gamma * gamma)
            + self.g * self.g / (n * self.p_min)
    }

    /// `8 (1 + κ B² / (N p_min))`
    pub fn c0(&self) -> f64 {
        8.0 * (1.0 + self.kappa() * self.b * self.b / (self.num_clients as f64 * self.p_min))
    }

    /// `ε_w √(L B² / μ)`; the bound needs this below an unspecified constant.
    pub fn small_error_indicator(&self) -> f64 {
        self.eps_w * math::sqrt(self.smoothness * self.b * self.b / self.mu)
    }

    pub fn bias_floor(&self) -> BiasFloor {
        BiasFloor {
            mu: self.mu,
            smoothness: self.smoothness,
            c0: self.c0(),
            eta_eff: self.eta_eff,
            h0: self.h0,
            variance: self.variance_term(),
            eps_w: self.eps_w,
            g: self.g,
            c: self.c,
        }
    }
}

/// Inputs of the bound with the variance term already evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasFloor {
    pub mu: f64,
    pub smoothness: f64,
    pub c0: f64,
    pub eta_eff: f64,
    pub h0: f64,
    pub variance: f64,
    pub eps_w: f64,
    pub g: f64,
    pub c: f64,
}

impl BiasFloor {
    pub fn step_bound(&self) -> f64 {
        1.0 / (self.c0 * self.smoothness)
    }

    pub fn contraction(&self, rounds: usize) -> f64 {
        math::powf(1.0 - self.mu * self.eta_eff / 8.0, rounds as f64) * self.h0
    }

    pub fn variance_floor(&self) -> f64 {
        self.c * self.eta_eff * self.variance / self.mu
    }

    /// `C ε_w² G² / μ`
    pub fn weight_error_floor(&self) -> f64 {
        self.c * self.eps_w * self.eps_w * self.g * self.g / self.mu
    }
}

/// `(1 − μη̃/8)^R h₀ + C η̃ V/μ + C ε_w² G²/μ`, valid for `η̃ ≤ 1/(c₀ L)`.
pub fn bias_floor_rhs(floor: &BiasFloor, rounds: usize) -> Result<f64> {
    let bound = floor.step_bound();
    if floor.eta_eff > bound {
        return Err(Error::StepSize {
            eta_eff: floor.eta_eff,
            bound,
        });
    }
    Ok(floor.contraction(rounds) + floor.variance_floor() + floor.weight_error_floor())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualWeights {
    pub rho: Vec<f64>,
    pub eps_w: f64,
}

/// `ρ_i = p_i / p̂_i`, `ε_w = max_i |ρ_i − 1|`.
pub fn residual_weight_error(p_true: &[f64], p_hat: &[f64]) -> Result<ResidualWeights> {
    if p_true.len() != p_hat.len() {
        return Err(Error::Dimension {
            expected: p_true.len(),
            actual: p_hat.len(),
        });
    }
    if let Some(bad) = p_hat.iter().find(|&&p| !(p > 0.0)) {
        return Err(Error::Invariant(alloc::format!(
            "estimated inclusion probability {bad} is not positive"
        )));
    }
    let rho: Vec<f64> = p_true.iter().zip(p_hat).map(|(p, q)| p / q).collect();
    let eps_w = rho.iter().fold(0.0, |m, r| f64::max(m, (r - 1.0).abs()));
    Ok(ResidualWeights { rho, eps_w })
}

/// Aggregators whose expectation can be enumerated.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    /// `(1/divisor) Σ_{A=1} Δ_i / probs_i`
    Ipw { probs: Vec<f64>, divisor: f64 },
    /// Mean over participants, conditioned on a nonempty round.
    Naive,
    /// `Σ_{A=1} q_i Δ_i / part_i`
    Calibrated { weights: Vec<f64>, part: Vec<f64> },
}

pub const MAX_ENUMERATION_CLIENTS: usize = 20;

/// Exact expectation of an aggregator over all `2ⁿ` participation patterns,
/// pattern `A` having probability `Π p_i^{A_i} (1 − p_i)^{1 − A_i}`. Empty
/// rounds contribute a zero update, except for [`Estimator::Naive`], whose
/// expectation is conditioned on a nonempty round (empty rounds are skipped).
pub fn enumerate_ipw_expectation(
    deltas: &[Vec<f64>],
    p_true: &[f64],
    estimator: &Estimator,
) -> Result<Vec<f64>> {
    let n = deltas.len();
    if n > MAX_ENUMERATION_CLIENTS {
        return Err(Error::TooManyClients {
            clients: n,
            max: MAX_ENUMERATION_CLIENTS,
        });
    }
    if p_true.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: p_true.len(),
        });
    }
    let dim = deltas.first().map_or(0, Vec::len);
    let q_dense: Option<Vec<Option<f64>>> = match estimator {
        Estimator::Calibrated { weights, .. } => Some(weights.iter().map(|&w| Some(w)).collect()),
        _ => None,
    };
    let mut expectation = vec![0.0; dim];
    let mut nonempty_mass = 0.0;
    let mut updates: Vec<RoundUpdate> = Vec::with_capacity(n);
    for mask in 0u32..(1u32 << n) {
        let prob = (0..n)
            .map(|i| if mask >> i & 1 == 1 { p_true[i] } else { 1.0 - p_true[i] })
            .product::<f64>();
        if prob == 0.0 || mask == 0 {
            continue;
        }
        updates.clear();
        updates.extend((0..n).filter(|i| mask >> i & 1 == 1).map(|i| RoundUpdate {
            client_id: i,
            delta: deltas[i].clone(),
        }));
        let agg = match estimator {
            Estimator::Ipw { probs, divisor } => aggregate_ipw(&updates, probs, *divisor)?,
            Estimator::Naive => aggregate_naive(&updates).expect("nonempty pattern"),
            Estimator::Calibrated { part, .. } => calibrated_round_update(
                q_dense.as_deref().expect("set above"),
                &updates,
                part,
                false,
            )?,
        };
        axpy(prob, &agg, &mut expectation);
        nonempty_mass += prob;
    }
    if matches!(estimator, Estimator::Naive) {
        if nonempty_mass == 0.0 {
            return Err(Error::DegenerateData("every participation pattern is empty"));
        }
        expectation.iter_mut().for_each(|v| *v /= nonempty_mass);
    }
    Ok(expectation)
}

/// Server iterates when every round applies the exact expected aggregate
/// of the IPW estimator with probabilities `p_used` while clients actually
/// participate with `p_true`. Local updates are full-batch.
pub fn expected_ipw_dynamics<O: LocalObjective>(
    clients: &[O],
    p_true: &[f64],
    p_used: &[f64],
    divisor: f64,
    config: &TrainingConfig,
    theta0: Vec<f64>,
) -> Result<ServerState> {
    config.validate()?;
    let config = TrainingConfig {
        batch_size: BatchSize::Full,
        ..config.clone()
    };
    let estimator = Estimator::Ipw {
        probs: p_used.to_vec(),
        divisor,
    };
    let mut state = ServerState::new(theta0);
    for round in 1..=config.rounds {
        let deltas = clients
            .iter()
            .enumerate()
            .map(|(i, c)| local_update(c, i, &state.theta, &config, round).map(|u| u.delta))
            .collect::<Result<Vec<_>>>()?;
        let agg = enumerate_ipw_expectation(&deltas, p_true, &estimator)?;
        state.step(&agg, config.server_step_size)?;
    }
    Ok(state)
}

/// `G = √(mean_i ‖∇f_i(θ*)‖²)`
pub fn estimate_heterogeneity(pop: &[ClientRecord], theta_star: &[f64], ridge: f64) -> Result<f64> {
    if pop.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    let mut total = 0.0;
    for c in pop {
        let g = client_gradient(c, theta_star, ridge)?;
        total += crate::linalg::dot(&g, &g);
    }
    Ok(math::sqrt(total / pop.len() as f64))
}
