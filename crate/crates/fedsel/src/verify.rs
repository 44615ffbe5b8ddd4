//! Analytical and invariant checks, run as one pass/fail report.

use std::io::Write;

use fedsel_core::calibration::{calibrated_round_update, solve_calibration_weights};
use fedsel_core::federation::{BatchSize, RoundUpdate, TrainingConfig};
use fedsel_core::linalg::RowMatrix;
use fedsel_core::objective::LocalObjective;
use fedsel_core::rng::{Purpose, StreamKey};
use fedsel_core::theory::{
    bias_floor_rhs, enumerate_ipw_expectation, expected_ipw_dynamics, residual_weight_error,
    two_client_gap, two_client_minimizer, BiasFloor, Estimator, TwoClientInstance,
};
use rand::Rng;

use crate::config::ExperimentConfig;
use crate::output::float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    /// `|actual − expected| ≤ tolerance`
    Within,
    /// `actual ≥ expected − tolerance`
    AtLeast,
    /// `actual ≤ expected + tolerance`
    AtMost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub expected: f64,
    pub actual: f64,
    pub tolerance: f64,
    pub relation: Relation,
}

impl Check {
    pub fn passed(&self) -> bool {
        let (a, e, t) = (self.actual, self.expected, self.tolerance);
        match self.relation {
            Relation::Within => (a - e).abs() <= t,
            Relation::AtLeast => a >= e - t,
            Relation::AtMost => a <= e + t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["check", "relation", "expected", "actual", "tolerance", "pass"])?;
        for c in &self.checks {
            let relation = match c.relation {
                Relation::Within => "within",
                Relation::AtLeast => "at_least",
                Relation::AtMost => "at_most",
            };
            w.write_record([
                c.name.to_owned(),
                relation.to_owned(),
                float(c.expected),
                float(c.actual),
                float(c.tolerance),
                c.passed().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The closed forms under test. Swapping one for a wrong formula must make
/// the suite fail.
#[derive(Clone, Copy)]
pub struct Formulas {
    pub minimizer: fn(&TwoClientInstance) -> f64,
    pub gap: fn(&TwoClientInstance) -> f64,
    pub bias_floor: fn(&BiasFloor, usize) -> fedsel_core::Result<f64>,
}

impl Default for Formulas {
    fn default() -> Self {
        Self {
            minimizer: two_client_minimizer,
            gap: two_client_gap,
            bias_floor: bias_floor_rhs,
        }
    }
}

pub fn run_verification_suite(config: &ExperimentConfig) -> VerificationReport {
    run_verification_suite_with(config, &Formulas::default())
}

const GRID_MU: [f64; 3] = [0.5, 1.0, 2.0];
const GRID_A: [f64; 3] = [0.5, 1.0, 2.0];
const GRID_EPS: [f64; 3] = [0.1, 0.3, 0.5];

fn lower_bound_grid() -> impl Iterator<Item = TwoClientInstance> {
    GRID_MU.into_iter().flat_map(|mu| {
        GRID_A.into_iter().flat_map(move |a| {
            GRID_EPS
                .into_iter()
                .map(move |eps| TwoClientInstance::new(mu, a, eps).expect("grid is valid"))
        })
    })
}

/// Root of the ρ-weighted derivative by bisection.
fn numeric_weighted_minimizer(inst: &TwoClientInstance, rho: [f64; 2]) -> f64 {
    let clients = inst.clients();
    let deriv = |t: f64| rho[0] * clients[0].gradient(&[t])[0] + rho[1] * clients[1].gradient(&[t])[0];
    let (mut lo, mut hi) = (-10.0 * inst.a, 10.0 * inst.a);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if deriv(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn reference_floor() -> BiasFloor {
    BiasFloor {
        mu: 1.0,
        smoothness: 1.0,
        c0: 8.16,
        eta_eff: 0.05,
        h0: 1.0,
        variance: 2.0,
        eps_w: 0.1,
        g: 1.0,
        c: 1.0,
    }
}

fn floor_or_nan(f: &Formulas, floor: &BiasFloor, rounds: usize) -> f64 {
    (f.bias_floor)(floor, rounds).unwrap_or(f64::NAN)
}

fn max_monotonicity_violation(values: impl Iterator<Item = f64>) -> f64 {
    let mut worst = 0.0_f64;
    let mut prev = f64::NEG_INFINITY;
    for v in values {
        if v.is_nan() {
            return f64::INFINITY;
        }
        worst = worst.max(prev - v);
        prev = v;
    }
    worst
}

pub fn run_verification_suite_with(config: &ExperimentConfig, f: &Formulas) -> VerificationReport {
    let mut checks = Vec::new();
    let mut push = |name, expected, actual, tolerance, relation| {
        checks.push(Check {
            name,
            expected,
            actual,
            tolerance,
            relation,
        })
    };

    // Two-client lower-bound construction.
    let half = TwoClientInstance::new(1.0, 1.0, 0.5).expect("valid");
    push("lower_bound_minimizer_example", 0.5, (f.minimizer)(&half), 1e-15, Relation::Within);
    push("lower_bound_gap_example", 0.125, (f.gap)(&half), 1e-15, Relation::Within);
    let zero = TwoClientInstance::new(1.0, 1.0, 0.0).expect("valid");
    push("lower_bound_unweighted_minimizer", 0.0, (f.minimizer)(&zero), 0.0, Relation::Within);

    let (mut min_err, mut gap_err, mut margin) = (0.0_f64, 0.0_f64, f64::INFINITY);
    for inst in lower_bound_grid() {
        let theta_rho = numeric_weighted_minimizer(&inst, inst.rho());
        let theta_star = numeric_weighted_minimizer(&inst, [1.0, 1.0]);
        min_err = min_err.max(((f.minimizer)(&inst) - theta_rho).abs());
        let direct = inst.target(theta_rho) - inst.target(theta_star);
        let gap = (f.gap)(&inst);
        gap_err = gap_err.max((gap - direct).abs());
        let bound = 0.125 * inst.eps_w * inst.eps_w * inst.g_squared() / inst.mu;
        margin = margin.min(gap - bound);
    }
    push("lower_bound_minimizer_grid_max_error", 0.0, min_err, 1e-10, Relation::Within);
    push("lower_bound_gap_grid_max_error", 0.0, gap_err, 1e-10, Relation::Within);
    push("lower_bound_gap_exceeds_eighth", 0.0, margin, 0.0, Relation::AtLeast);

    // Bias-floor evaluator.
    let reference = reference_floor();
    // 0.99375^200 + 0.1 + 0.01
    push("bias_floor_example", 0.395_383_153_683_493_5, floor_or_nan(f, &reference, 200), 1e-12, Relation::Within);
    let no_error = BiasFloor { eps_w: 0.0, ..reference };
    push("bias_floor_zero_weight_error_term", 0.0, no_error.weight_error_floor(), 0.0, Relation::Within);
    push(
        "bias_floor_long_horizon_limit",
        reference.variance_floor() + reference.weight_error_floor(),
        floor_or_nan(f, &reference, 20_000),
        1e-12,
        Relation::Within,
    );
    let eps_grid = (0..=50).map(|k| floor_or_nan(f, &BiasFloor { eps_w: 0.01 * k as f64, ..reference }, 100));
    push("bias_floor_monotone_in_eps_w", 0.0, max_monotonicity_violation(eps_grid), 0.0, Relation::AtMost);
    let h0_grid = (0..=50).map(|k| floor_or_nan(f, &BiasFloor { h0: 0.1 * k as f64, ..reference }, 100));
    push("bias_floor_monotone_in_h0", 0.0, max_monotonicity_violation(h0_grid), 0.0, Relation::AtMost);
    let too_large = BiasFloor { eta_eff: 1.0, ..reference };
    push(
        "bias_floor_rejects_large_step",
        1.0,
        f64::from(u8::from((f.bias_floor)(&too_large, 10).is_err())),
        0.0,
        Relation::Within,
    );

    // Residual weight error.
    let rw = residual_weight_error(&[0.9 * 0.5, 0.6 * 0.5], &[0.5, 0.5]);
    push("participation_only_eps_w", 0.4, rw.map_or(f64::NAN, |r| r.eps_w), 1e-12, Relation::Within);

    // Exact enumeration of estimator expectations.
    let deltas = vec![vec![1.0], vec![2.0], vec![3.0]];
    let p = [0.5, 1.0, 0.25];
    let oracle = enumerate_ipw_expectation(&deltas, &p, &Estimator::Ipw { probs: p.to_vec(), divisor: 3.0 });
    push("oracle_ipw_enumeration_example", 2.0, oracle.map_or(f64::NAN, |e| e[0]), 1e-12, Relation::Within);
    let naive = enumerate_ipw_expectation(&deltas, &[0.9, 0.5, 0.1], &Estimator::Naive);
    push(
        "naive_enumeration_gap",
        0.05,
        naive.map_or(f64::NAN, |e| (e[0] - 2.0).abs()),
        0.0,
        Relation::AtLeast,
    );

    let mut rng = StreamKey::new(config.seed, Purpose::Sweep).rng();
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=10);
        let deltas: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..=1.0)).collect();
        let est = Estimator::Ipw { probs: p.clone(), divisor: n as f64 };
        match enumerate_ipw_expectation(&deltas, &p, &est) {
            Ok(e) => {
                for k in 0..2 {
                    let mean = deltas.iter().map(|d| d[k]).sum::<f64>() / n as f64;
                    worst = worst.max((e[k] - mean).abs());
                }
            }
            Err(_) => worst = f64::INFINITY,
        }
    }
    push("oracle_ipw_unbiased_random_instances", 0.0, worst, 1e-12, Relation::Within);

    // Calibration weights.
    let two = RowMatrix::from_rows(&[[0.0], [1.0]]).expect("static");
    let q2 = solve_calibration_weights(&two, &[0.7]).map(|w| w.weights);
    push(
        "calibration_two_point",
        0.0,
        q2.map_or(f64::NAN, |q| (q[0] - 0.3).abs().max((q[1] - 0.7).abs())),
        1e-12,
        Relation::Within,
    );
    let three = RowMatrix::from_rows(&[[0.0], [1.0], [2.0]]).expect("static");
    let q3 = solve_calibration_weights(&three, &[0.5]).map(|w| w.weights);
    push(
        "calibration_three_point",
        0.0,
        q3.map_or(f64::NAN, |q| {
            [7.0 / 12.0, 4.0 / 12.0, 1.0 / 12.0]
                .iter()
                .zip(&q)
                .map(|(e, a)| (e - a).abs())
                .fold(0.0, f64::max)
        }),
        1e-12,
        Relation::Within,
    );
    let (mut sum_err, mut moment_err, mut min_q) = (0.0_f64, 0.0_f64, f64::INFINITY);
    for _ in 0..100 {
        let n = rng.random_range(4..=50);
        let q = rng.random_range(1..=3);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..q).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        // a strictly positive mixture of the rows is feasible
        let mix: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = mix.iter().sum();
        let target: Vec<f64> = (0..q)
            .map(|k| rows.iter().zip(&mix).map(|(r, m)| r[k] * m).sum::<f64>() / total)
            .collect();
        let b = RowMatrix::from_rows(&rows).expect("rectangular");
        match solve_calibration_weights(&b, &target) {
            Ok(w) => {
                sum_err = sum_err.max((w.weights.iter().sum::<f64>() - 1.0).abs());
                for k in 0..q {
                    let m: f64 = rows.iter().zip(&w.weights).map(|(r, qi)| r[k] * qi).sum();
                    moment_err = moment_err.max((m - target[k]).abs());
                }
                min_q = w.weights.iter().copied().fold(min_q, f64::min);
            }
            Err(_) => sum_err = f64::INFINITY,
        }
    }
    push("calibration_random_sum_constraint", 0.0, sum_err, 1e-10, Relation::Within);
    push("calibration_random_moment_constraints", 0.0, moment_err, 1e-8, Relation::Within);
    push("calibration_random_nonnegative", 0.0, min_q, 0.0, Relation::AtLeast);

    // Calibrated update is unbiased for Σ q Δ over participation patterns.
    let q = [0.5, 0.3, 0.2];
    let part = [0.8, 0.5, 0.25];
    let d = [1.0, -2.0, 4.0];
    let mut expectation = 0.0;
    for mask in 0..8u32 {
        let mut prob = 1.0;
        let mut updates = Vec::new();
        for i in 0..3 {
            if mask >> i & 1 == 1 {
                prob *= part[i];
                updates.push(RoundUpdate { client_id: i, delta: vec![d[i]] });
            } else {
                prob *= 1.0 - part[i];
            }
        }
        let dense: Vec<Option<f64>> = q.iter().map(|&x| Some(x)).collect();
        let agg = calibrated_round_update(&dense, &updates, &part, false)
            .map_or(f64::NAN, |a| a.first().copied().unwrap_or(0.0));
        expectation += prob * agg;
    }
    let target: f64 = q.iter().zip(&d).map(|(a, b)| a * b).sum();
    push("calibrated_update_unbiased", target, expectation, 1e-12, Relation::Within);

    // Deterministic participation-only dynamics on the two-client instance.
    let inst = TwoClientInstance::new(1.0, 1.0, 0.4).expect("valid");
    let enroll = inst.enrollment_probs();
    let part = [0.5, 0.8];
    let p_true = [enroll[0] * part[0], enroll[1] * part[1]];
    let training = TrainingConfig {
        local_steps: 5,
        local_step_size: 0.1,
        server_step_size: 1.0,
        rounds: 400,
        batch_size: BatchSize::Full,
        seed: config.seed,
    };
    let clients = inst.clients();
    let final_theta = |p_used: &[f64]| {
        expected_ipw_dynamics(&clients, &p_true, p_used, 2.0, &training, vec![1.0])
            .map_or(f64::NAN, |s| s.theta[0])
    };
    push("participation_only_floor", (f.minimizer)(&inst), final_theta(&part), 1e-3, Relation::Within);
    push("two_stage_weights_reach_optimum", 0.0, final_theta(&p_true), 1e-3, Relation::Within);

    VerificationReport { checks }
}
