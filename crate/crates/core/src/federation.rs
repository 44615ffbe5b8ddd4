//! The federated training loop: local SGD on participants, one of five
//! aggregation rules, and the server step `θ ← θ + γ · aggregate`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::calibration::{balance_rows, calibrate_with_projection, calibrated_round_update, BalanceMap, CalibrationOutcome};
use crate::linalg::{axpy, norm2, sub};
use crate::objective::LocalObjective;
use crate::propensity::{PropensityConfig, PropensitySchedule};
use crate::rng::{Purpose, StreamKey};
use crate::selection::{RoundDraw, SelectionSpec, SelectionTrace};
use crate::synthgen::{population_objective, ClientRecord, OracleSolution};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Plain FedAvg over observed clients.
    Naive,
    /// Corrects participation among enrolled clients only.
    RoundOnlyIpw,
    /// Plug-in two-stage inclusion probabilities.
    FedIpw,
    /// True inclusion probabilities.
    OracleIpw,
    /// Round-only IPW with calibration weights in place of `1/N_enroll`.
    Calibrated,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Naive,
        Method::RoundOnlyIpw,
        Method::FedIpw,
        Method::OracleIpw,
        Method::Calibrated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::RoundOnlyIpw => "round_only_ipw",
            Method::FedIpw => "fedipw",
            Method::OracleIpw => "oracle_ipw",
            Method::Calibrated => "calibrated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    fn needs_estimates(self) -> bool {
        matches!(self, Method::RoundOnlyIpw | Method::FedIpw | Method::Calibrated)
    }
}

impl core::fmt::Display for Method {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Full,
    Mini(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub local_steps: usize,
    pub local_step_size: f64,
    pub server_step_size: f64,
    pub rounds: usize,
    pub batch_size: BatchSize,
    /// Seeds both the selection draws and local SGD.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            local_steps: 5,
            local_step_size: 0.1,
            server_step_size: 1.0,
            rounds: 300,
            batch_size: BatchSize::Mini(32),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// `η̃ = K γ η`
    pub fn effective_step_size(&self) -> f64 {
        self.local_steps as f64 * self.server_step_size * self.local_step_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 || self.rounds == 0 {
            return Err(Error::Config("local_steps and rounds must be positive".into()));
        }
        if !(self.local_step_size > 0.0) {
            return Err(Error::Config("local_step_size must be positive".into()));
        }
        if !(self.server_step_size >= 1.0) {
            return Err(Error::Config("server_step_size must be at least 1".into()));
        }
        if self.batch_size == BatchSize::Mini(0) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundUpdate {
    pub client_id: usize,
    pub delta: Vec<f64>,
}

/// `K` local SGD steps from `θ`; returns `Δ = y_K − θ`.
///
/// Minibatches are drawn with replacement from a stream keyed by
/// `(seed, round, client, step)`; `η = 0` gives `Δ = 0`.
pub fn local_update<O: LocalObjective + ?Sized>(
    objective: &O,
    client_id: usize,
    theta: &[f64],
    config: &TrainingConfig,
    round: usize,
) -> Result<RoundUpdate> {
    if theta.len() != objective.dim() {
        return Err(Error::Dimension {
            expected: objective.dim(),
            actual: theta.len(),
        });
    }
    let n = objective.num_samples();
    let mut y = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    let mut batch = Vec::new();
    for step in 0..config.local_steps {
        match config.batch_size {
            BatchSize::Full => objective.gradient_into(&y, &mut grad),
            BatchSize::Mini(b) => {
                let mut rng = StreamKey::new(config.seed, Purpose::LocalSgd)
                    .round(round)
                    .client(client_id)
                    .step(step)
                    .rng();
                batch.clear();
                batch.extend((0..b).map(|_| rng.random_range(0..n)));
                objective.batch_gradient_into(&y, &batch, &mut grad);
            }
        }
        axpy(-config.local_step_size, &grad, &mut y);
    }
    Ok(RoundUpdate {
        client_id,
        delta: sub(&y, theta),
    })
}

fn sorted(updates: &[RoundUpdate]) -> Vec<&RoundUpdate> {
    let mut v: Vec<&RoundUpdate> = updates.iter().collect();
    v.sort_by_key(|u| u.client_id);
    v
}

/// `(1/|S|) Σ_{i ∈ S} Δ_i`; `None` for an empty round.
pub fn aggregate_naive(updates: &[RoundUpdate]) -> Option<Vec<f64>> {
    let first = updates.first()?;
    let mut acc = vec![0.0; first.delta.len()];
    let w = 1.0 / updates.len() as f64;
    for u in sorted(updates) {
        axpy(w, &u.delta, &mut acc);
    }
    Some(acc)
}

/// `(1/divisor) Σ_{i ∈ S} Δ_i / p_i` with `p` indexed by client id.
pub fn aggregate_ipw(updates: &[RoundUpdate], probs: &[f64], divisor: f64) -> Result<Vec<f64>> {
    if !(divisor > 0.0) {
        return Err(Error::Invariant(format!("IPW divisor {divisor} is not positive")));
    }
    let dim = updates.first().map_or(0, |u| u.delta.len());
    let mut acc = vec![0.0; dim];
    for u in sorted(updates) {
        let p = *probs.get(u.client_id).ok_or(Error::Dimension {
            expected: u.client_id + 1,
            actual: probs.len(),
        })?;
        if !(p > 0.0) {
            return Err(Error::Invariant(format!(
                "inclusion probability {p} of client {} is not positive",
                u.client_id
            )));
        }
        axpy(1.0 / (divisor * p), &u.delta, &mut acc);
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub target_loss: f64,
    pub dist_to_opt: f64,
    pub participants: usize,
    /// Mean multiplier applied to a participant's update.
    pub mean_weight: f64,
    /// `max_i |ρ_i − 1|` with `ρ_i = p_i / p̂_i`.
    pub max_rho_err: f64,
    /// The round had no participants and the server step was skipped.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub theta: Vec<f64>,
    pub round: usize,
    pub history: Vec<RoundMetrics>,
}

impl ServerState {
    pub fn new(theta: Vec<f64>) -> Self {
        Self {
            theta,
            round: 0,
            history: Vec::new(),
        }
    }

    /// `θ ← θ + γ · aggregate`. A non-finite aggregate leaves the state
    /// untouched and is reported.
    pub fn step(&mut self, aggregate: &[f64], server_step_size: f64) -> Result<()> {
        if aggregate.len() != self.theta.len() {
            return Err(Error::Dimension {
                expected: self.theta.len(),
                actual: aggregate.len(),
            });
        }
        if aggregate.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                round: self.round + 1,
            });
        }
        axpy(server_step_size, aggregate, &mut self.theta);
        self.round += 1;
        Ok(())
    }

    /// Counts a round in which nothing was aggregated.
    pub fn skip(&mut self) {
        self.round += 1;
    }
}

pub fn server_step(mut state: ServerState, aggregate: &[f64], server_step_size: f64) -> Result<ServerState> {
    state.step(aggregate, server_step_size)?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PropensitySource {
    /// Fitted models (the deployable estimator).
    #[default]
    Estimated,
    /// True participation / inclusion probabilities.
    True,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSetup {
    pub balance_map: BalanceMap,
    /// Moments the enrolled clients are calibrated to.
    pub target_moments: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    pub participation_source: PropensitySource,
    /// Replaces the known population size in FedIPW / oracle IPW.
    pub population_size: Option<f64>,
    pub calibration: Option<CalibrationSetup>,
    /// Hájek-style normalization of the calibrated update.
    pub self_normalize: bool,
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            participation_source: PropensitySource::Estimated,
            population_size: None,
            calibration: None,
            self_normalize: false,
        }
    }
}

/// Selection draws and propensity estimates shared by every method run on
/// the same population and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSelection {
    pub trace: SelectionTrace,
    pub schedule: PropensitySchedule,
}

impl PreparedSelection {
    pub fn new(
        pop: &[ClientRecord],
        spec: &SelectionSpec,
        propensity: &PropensityConfig,
        rounds: usize,
        seed: u64,
    ) -> Result<Self> {
        let trace = SelectionTrace::simulate(spec, pop, rounds, seed)?;
        let schedule = PropensitySchedule::estimate(pop, &trace, propensity)?;
        Ok(Self { trace, schedule })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub method: Method,
    pub state: ServerState,
    pub calibration: Option<CalibrationOutcome>,
}

impl TrainingRun {
    pub fn metrics(&self) -> &[RoundMetrics] {
        &self.state.history
    }

    pub fn final_metrics(&self) -> Option<&RoundMetrics> {
        self.state.history.last()
    }
}

/// Draws selection, fits propensities and trains with one method.
pub fn run_training(
    pop: &[ClientRecord],
    selection: &SelectionSpec,
    config: &TrainingConfig,
    oracle: &OracleSolution,
    ridge: f64,
    method: &MethodConfig,
    propensity: &PropensityConfig,
) -> Result<TrainingRun> {
    config.validate()?;
    let prepared = PreparedSelection::new(pop, selection, propensity, config.rounds, config.seed)?;
    run_prepared(pop, &prepared, config, oracle, ridge, method)
}

/// Per-client probability used by the aggregator, for residual-weight
/// logging; `None` where the method defines no weight.
struct RoundWeights {
    used: Vec<Option<f64>>,
}

/// Trains on pre-drawn selection. Rounds are numbered from 1.
pub fn run_prepared(
    pop: &[ClientRecord],
    prepared: &PreparedSelection,
    config: &TrainingConfig,
    oracle: &OracleSolution,
    ridge: f64,
    method: &MethodConfig,
) -> Result<TrainingRun> {
    config.validate()?;
    if prepared.trace.rounds.len() < config.rounds {
        return Err(Error::Config(format!(
            "selection trace has {} rounds, training needs {}",
            prepared.trace.rounds.len(),
            config.rounds
        )));
    }
    let n = pop.len();
    let n_total = n as f64;
    let enrollment = &prepared.trace.enrollment;
    let n_enrolled = enrollment.count();

    let calibration = match method.method {
        Method::Calibrated => {
            let setup = method
                .calibration
                .as_ref()
                .ok_or_else(|| Error::Config("calibrated method needs a calibration setup".into()))?;
            let ids: Vec<usize> = enrollment.enrolled_ids().collect();
            let rows = balance_rows(&setup.balance_map, pop, &ids)?;
            let mut outcome = calibrate_with_projection(&rows, &setup.target_moments)?;
            outcome.weights.clients = ids;
            Some(outcome)
        }
        _ => None,
    };
    let dense_q = calibration.as_ref().map(|c| c.weights.dense(n));

    let mut state = ServerState::new(vec![0.0; oracle.theta_star.len()]);
    for round_idx in 0..config.rounds {
        let draw: &RoundDraw = &prepared.trace.rounds[round_idx];
        let est = &prepared.schedule.estimates[round_idx];
        let round = round_idx + 1;
        let participants = draw.participants();

        let part_used: &[f64] = match method.participation_source {
            PropensitySource::Estimated => &est.part_hat,
            PropensitySource::True => &draw.part_prob,
        };
        let divisor = method.population_size.unwrap_or(n_total);
        let weights = RoundWeights {
            used: match method.method {
                Method::Naive => {
                    let s = participants.len() as f64 / n_total;
                    vec![Some(s); n]
                }
                Method::RoundOnlyIpw => part_used.iter().map(|&p| Some(p)).collect(),
                Method::FedIpw => match method.participation_source {
                    PropensitySource::Estimated => est.p_hat.iter().map(|&p| Some(p)).collect(),
                    PropensitySource::True => draw.inclusion.iter().map(|&p| Some(p)).collect(),
                },
                Method::OracleIpw => draw.inclusion.iter().map(|&p| Some(p)).collect(),
                Method::Calibrated => {
                    let q = dense_q.as_ref().expect("calibration computed above");
                    (0..n)
                        .map(|i| q[i].map(|qi| part_used[i] / (n_total * qi)))
                        .collect()
                }
            },
        };
        let max_rho_err = weights
            .used
            .iter()
            .zip(&draw.inclusion)
            .filter_map(|(u, &p)| u.map(|u| (p / u - 1.0).abs()))
            .fold(0.0, f64::max);

        if participants.is_empty() {
            state.skip();
            let target_loss = population_objective(pop, &state.theta, ridge)?;
            state.history.push(RoundMetrics {
                round,
                target_loss,
                dist_to_opt: norm2(&sub(&state.theta, &oracle.theta_star)),
                participants: 0,
                mean_weight: 0.0,
                max_rho_err,
                skipped: true,
            });
            continue;
        }

        let updates = participants
            .iter()
            .map(|&i| local_update(&pop[i].objective(ridge), i, &state.theta, config, round))
            .collect::<Result<Vec<_>>>()?;

        let (aggregate, mean_weight) = match method.method {
            Method::Naive => (
                aggregate_naive(&updates).expect("nonempty"),
                1.0 / participants.len() as f64,
            ),
            Method::Calibrated => {
                let q = dense_q.as_ref().expect("calibration computed above");
                let agg = calibrated_round_update(q, &updates, part_used, method.self_normalize)?;
                let mw = participants
                    .iter()
                    .map(|&i| q[i].unwrap_or(0.0) / part_used[i])
                    .sum::<f64>()
                    / participants.len() as f64;
                (agg, mw)
            }
            m => {
                let (probs, div): (Vec<f64>, f64) = match m {
                    Method::RoundOnlyIpw => (part_used.to_vec(), n_enrolled as f64),
                    _ => (weights.used.iter().map(|u| u.unwrap_or(0.0)).collect(), divisor),
                };
                let agg = aggregate_ipw(&updates, &probs, div)?;
                let mw = participants.iter().map(|&i| 1.0 / (div * probs[i])).sum::<f64>()
                    / participants.len() as f64;
                (agg, mw)
            }
        };
        debug_assert!(!method.method.needs_estimates() || !est.p_hat.is_empty());

        state.step(&aggregate, config.server_step_size)?;
        let target_loss = population_objective(pop, &state.theta, ridge)?;
        state.history.push(RoundMetrics {
            round,
            target_loss,
            dist_to_opt: norm2(&sub(&state.theta, &oracle.theta_star)),
            participants: participants.len(),
            mean_weight,
            max_rho_err,
            skipped: false,
        });
    }
    Ok(TrainingRun {
        method: method.method,
        state,
        calibration,
    })
}
