//! Aggregate calibration for the limited-information regime.
//!
//! When covariates are observed only for enrolled clients but the target
//! population average `μ_b = E[b(Z)]` of a balance map `b` is known, enrolled
//! clients get nonnegative weights `q` with `Σ q_i = 1` and
//! `Σ q_i b(Z_i) = μ_b`, chosen as close to uniform as possible. Those
//! weights then replace the enrollment factor in the round update.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::math;
use crate::federation::RoundUpdate;
use crate::linalg::{axpy, dot, norm2, norm_inf, RowMatrix};
use crate::rng::{Purpose, StreamKey};
use crate::synthgen::ClientRecord;
use crate::{Error, Result};

/// Tolerance on `Σ q_i = 1`.
pub const SUM_TOL: f64 = 1e-10;
/// Tolerance on the moment constraints.
pub const MOMENT_TOL: f64 = 1e-8;
/// Residuals above this are reported as infeasible.
pub const INFEASIBLE_RESIDUAL: f64 = 1e-6;

/// Equal-width indicator bins over one covariate. `edges` are the interior
/// cut points, so `edges.len() + 1` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorBins {
    pub coordinate: usize,
    pub edges: Vec<f64>,
}

impl IndicatorBins {
    pub fn bin_of(&self, value: f64) -> usize {
        self.edges.iter().take_while(|&&e| value >= e).count()
    }

    pub fn num_bins(&self) -> usize {
        self.edges.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceMap {
    /// Include the raw covariates.
    pub identity: bool,
    pub bins: Option<IndicatorBins>,
}

impl Default for BalanceMap {
    fn default() -> Self {
        Self {
            identity: true,
            bins: None,
        }
    }
}

impl BalanceMap {
    pub fn output_dim(&self, covariate_dim: usize) -> usize {
        let id = if self.identity { covariate_dim } else { 0 };
        id + self.bins.as_ref().map_or(0, IndicatorBins::num_bins)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSpec {
    pub balance_map: BalanceMap,
    pub target_moments: Vec<f64>,
    pub moment_noise_sigma: f64,
}

/// `b(z)`: the identity coordinates (if enabled) followed by a one-hot bin
/// indicator (if configured).
pub fn evaluate_balance_map(map: &BalanceMap, z: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(map.output_dim(z.len()));
    if map.identity {
        out.extend_from_slice(z);
    }
    if let Some(bins) = &map.bins {
        let v = *z.get(bins.coordinate).ok_or(Error::Dimension {
            expected: bins.coordinate + 1,
            actual: z.len(),
        })?;
        let hot = bins.bin_of(v);
        out.extend((0..bins.num_bins()).map(|k| if k == hot { 1.0 } else { 0.0 }));
    }
    if out.is_empty() {
        return Err(Error::Config("balance map produces no moments".into()));
    }
    Ok(out)
}

/// Rows `b(Z_i)` for the given clients.
pub fn balance_rows(map: &BalanceMap, pop: &[ClientRecord], ids: &[usize]) -> Result<RowMatrix> {
    let rows = ids
        .iter()
        .map(|&i| evaluate_balance_map(map, &pop[i].z))
        .collect::<Result<Vec<_>>>()?;
    RowMatrix::from_rows(&rows)
}

/// Exact population average of `b`, summed in client order.
pub fn population_moments(map: &BalanceMap, pop: &[ClientRecord]) -> Result<Vec<f64>> {
    let first = pop.first().ok_or(Error::EmptyPopulation)?;
    let mut acc = vec![0.0; map.output_dim(first.z.len())];
    for c in pop {
        axpy(1.0, &evaluate_balance_map(map, &c.z)?, &mut acc);
    }
    let n = pop.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationWeights {
    /// Client ids the weights refer to, ascending.
    pub clients: Vec<usize>,
    pub weights: Vec<f64>,
    /// Multipliers of `[Σq = 1, Σq b = μ]`.
    pub lagrange: Vec<f64>,
    /// Positions (into `clients`) pinned at zero.
    pub active_set: Vec<usize>,
    /// Largest absolute constraint violation.
    pub constraint_residual: f64,
}

impl CalibrationWeights {
    /// Weight per client id, `None` for clients outside the calibration set.
    pub fn dense(&self, num_clients: usize) -> Vec<Option<f64>> {
        let mut out = vec![None; num_clients];
        for (&i, &q) in self.clients.iter().zip(&self.weights) {
            out[i] = Some(q);
        }
        out
    }
}

struct Constraints<'a> {
    rows: &'a RowMatrix,
    rhs: Vec<f64>,
    uniform: f64,
}

impl Constraints<'_> {
    fn num(&self) -> usize {
        self.rows.cols() + 1
    }

    /// `a_i` = (1, b_i)
    fn column(&self, i: usize, out: &mut [f64]) {
        out[0] = 1.0;
        out[1..].copy_from_slice(self.rows.row(i));
    }

    /// Unclipped weight `u + a_iᵀλ`.
    fn raw_weight(&self, i: usize, lambda: &[f64]) -> f64 {
        self.uniform + lambda[0] + dot(&lambda[1..], self.rows.row(i))
    }

    fn weights(&self, lambda: &[f64]) -> Vec<f64> {
        (0..self.rows.rows())
            .map(|i| self.raw_weight(i, lambda).max(0.0))
            .collect()
    }

    /// `c − A q`
    fn residual(&self, q: &[f64]) -> Vec<f64> {
        let mut r = self.rhs.clone();
        let mut a = vec![0.0; self.num()];
        for (i, &qi) in q.iter().enumerate() {
            self.column(i, &mut a);
            axpy(-qi, &a, &mut r);
        }
        r
    }

    /// Concave dual objective `λᵀc − ½‖max(0, u + Aᵀλ)‖²`.
    fn dual(&self, lambda: &[f64]) -> f64 {
        let q = self.weights(lambda);
        dot(lambda, &self.rhs) - 0.5 * dot(&q, &q)
    }

    /// `Σ_{i ∈ free} a_i a_iᵀ`
    fn gram(&self, free: impl Iterator<Item = usize>) -> DMatrix<f64> {
        let k = self.num();
        let mut g = DMatrix::zeros(k, k);
        let mut a = vec![0.0; k];
        for i in free {
            self.column(i, &mut a);
            for r in 0..k {
                for c in 0..k {
                    g[(r, c)] += a[r] * a[c];
                }
            }
        }
        g
    }
}

fn is_rank_deficient(g: &DMatrix<f64>) -> bool {
    let eig = g.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    !(max > 0.0) || min <= 1e-12 * max
}

const MAX_ACTIVE_SET_ITERS: usize = 500;

/// Weights closest to uniform (squared distance) subject to
/// `Σ q_i = 1`, `Σ q_i b_i = μ_b` and `q_i ≥ 0`.
///
/// Starts from the equality-constrained closed form
/// `q = u + Aᵀ(AAᵀ)⁻¹(c − Au)`, then alternates between pinning negative
/// weights at zero and re-solving the closed form on the remaining free
/// weights; pinned weights are released again when their multiplier says so.
/// Each re-solve is a Newton step on the concave dual, damped by backtracking
/// when it would not increase the dual objective.
pub fn solve_calibration_weights(b_rows: &RowMatrix, target: &[f64]) -> Result<CalibrationWeights> {
    let n = b_rows.rows();
    if target.len() != b_rows.cols() {
        return Err(Error::Dimension {
            expected: b_rows.cols(),
            actual: target.len(),
        });
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("calibration target must be finite".into()));
    }
    if n < b_rows.cols() + 1 {
        return Err(Error::DegenerateConstraints);
    }
    let mut rhs = vec![1.0];
    rhs.extend_from_slice(target);
    let cons = Constraints {
        rows: b_rows,
        rhs,
        uniform: 1.0 / n as f64,
    };
    let k = cons.num();
    if is_rank_deficient(&cons.gram(0..n)) {
        return Err(Error::DegenerateConstraints);
    }

    // Scale for the stopping test: the constraint values themselves.
    let scale = 1.0 + norm_inf(&cons.rhs);
    let mut lambda = vec![0.0; k];
    let mut dual = cons.dual(&lambda);
    let mut converged = false;
    for _ in 0..MAX_ACTIVE_SET_ITERS {
        let q = cons.weights(&lambda);
        let resid = cons.residual(&q);
        if norm_inf(&resid) <= 1e-14 * scale {
            converged = true;
            break;
        }
        let free = (0..n).filter(|&i| cons.raw_weight(i, &lambda) > 0.0);
        let g = cons.gram(free);
        let step = match g.clone().cholesky() {
            Some(ch) => ch.solve(&DVector::from_column_slice(&resid)),
            None => {
                // too few free weights to span the constraints; regularize
                let reg = g + DMatrix::identity(k, k) * 1e-10 * (1.0 + n as f64);
                match reg.cholesky() {
                    Some(ch) => ch.solve(&DVector::from_column_slice(&resid)),
                    None => break,
                }
            }
        };
        let slope = dot(step.as_slice(), &resid);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand: Vec<f64> = lambda
                .iter()
                .zip(step.iter())
                .map(|(l, s)| l + t * s)
                .collect();
            let d = cons.dual(&cand);
            if d >= dual + 1e-4 * t * slope || (t == 1.0 && d >= dual) {
                lambda = cand;
                dual = d;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved || norm_inf(&lambda) > 1e12 {
            break;
        }
    }

    let weights = cons.weights(&lambda);
    let resid = cons.residual(&weights);
    let residual = norm_inf(&resid);
    let sum_err = resid[0].abs();
    let moment_err = norm_inf(&resid[1..]);
    if residual > INFEASIBLE_RESIDUAL || (!converged && (sum_err > SUM_TOL || moment_err > MOMENT_TOL))
    {
        return Err(Error::Infeasible { residual });
    }
    let active_set = (0..n).filter(|&i| weights[i] == 0.0).collect();
    Ok(CalibrationWeights {
        clients: (0..n).collect(),
        weights,
        lagrange: lambda,
        active_set,
        constraint_residual: residual,
    })
}

/// Closest point of the convex hull of the rows to `target` (Euclidean),
/// found by accelerated projected gradient over the simplex of mixing
/// weights. Returns the hull point.
pub fn project_to_hull(b_rows: &RowMatrix, target: &[f64]) -> Vec<f64> {
    let n = b_rows.rows();
    let dim = b_rows.cols();
    let combine = |w: &[f64]| {
        let mut p = vec![0.0; dim];
        for (i, &wi) in w.iter().enumerate() {
            if wi != 0.0 {
                axpy(wi, b_rows.row(i), &mut p);
            }
        }
        p
    };
    // Lipschitz constant of the gradient: ‖B‖₂² ≤ Frobenius norm².
    let lip = b_rows.as_slice().iter().map(|v| v * v).sum::<f64>().max(1e-300);
    let mut w = vec![1.0 / n as f64; n];
    let mut y = w.clone();
    let mut t = 1.0;
    for _ in 0..5000 {
        let r = crate::linalg::sub(&combine(&y), target);
        let mut next: Vec<f64> = (0..n)
            .map(|i| y[i] - dot(b_rows.row(i), &r) / lip)
            .collect();
        project_simplex(&mut next);
        let t_next = (1.0 + math::sqrt(1.0 + 4.0 * t * t)) / 2.0;
        let beta = (t - 1.0) / t_next;
        let delta = crate::linalg::sub(&next, &w);
        y = next.iter().zip(&delta).map(|(a, d)| a + beta * d).collect();
        w = next;
        t = t_next;
        if norm_inf(&delta) < 1e-15 {
            break;
        }
    }
    combine(&w)
}

/// Euclidean projection onto the probability simplex (sort-based).
fn project_simplex(v: &mut [f64]) {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        css += uj;
        let cand = (css - 1.0) / (j + 1) as f64;
        if uj - cand > 0.0 {
            theta = cand;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - theta).max(0.0));
}

/// Fraction of the way from the projected point toward the row mean that an
/// infeasible target is moved, so that the adjusted target is interior.
pub const HULL_SHRINK: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub weights: CalibrationWeights,
    /// Target actually matched (equals the request when it was feasible).
    pub matched_target: Vec<f64>,
    /// `‖requested − matched‖₂`
    pub slack_norm: f64,
}

impl CalibrationOutcome {
    pub fn active_set_size(&self) -> usize {
        self.weights.active_set.len()
    }
}

/// Solves the calibration program; an infeasible target is first replaced by
/// its projection onto the hull of the rows (nudged toward the row mean) and
/// the distance moved is reported as slack.
pub fn calibrate_with_projection(b_rows: &RowMatrix, target: &[f64]) -> Result<CalibrationOutcome> {
    match solve_calibration_weights(b_rows, target) {
        Ok(weights) => Ok(CalibrationOutcome {
            weights,
            matched_target: target.to_vec(),
            slack_norm: 0.0,
        }),
        Err(Error::Infeasible { .. }) => {
            let proj = project_to_hull(b_rows, target);
            let n = b_rows.rows() as f64;
            let mut mean = vec![0.0; b_rows.cols()];
            for r in b_rows.iter_rows() {
                axpy(1.0 / n, r, &mut mean);
            }
            let adjusted: Vec<f64> = proj
                .iter()
                .zip(&mean)
                .map(|(p, m)| p + HULL_SHRINK * (m - p))
                .collect();
            let weights = solve_calibration_weights(b_rows, &adjusted)?;
            let slack_norm = norm2(&crate::linalg::sub(target, &adjusted));
            Ok(CalibrationOutcome {
                weights,
                matched_target: adjusted,
                slack_norm,
            })
        }
        Err(e) => Err(e),
    }
}

/// `Σ_{i ∈ S} q_i Δ_i / π̂_part,i`, summed in ascending client order.
/// With `self_normalize`, divides by `Σ_{i ∈ S} q_i / π̂_part,i` instead of 1.
pub fn calibrated_round_update(
    weights: &[Option<f64>],
    updates: &[RoundUpdate],
    part_hat: &[f64],
    self_normalize: bool,
) -> Result<Vec<f64>> {
    let dim = updates.first().map_or(0, |u| u.delta.len());
    let mut acc = vec![0.0; dim];
    let mut mass = 0.0;
    let mut order: Vec<&RoundUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    for u in order {
        let q = weights
            .get(u.client_id)
            .copied()
            .flatten()
            .ok_or_else(|| {
                Error::Invariant(format!("participant {} is not enrolled", u.client_id))
            })?;
        let p = part_hat[u.client_id];
        if !(p > 0.0) {
            return Err(Error::Invariant(format!(
                "participation propensity {p} of client {} is not positive",
                u.client_id
            )));
        }
        axpy(q / p, &u.delta, &mut acc);
        mass += q / p;
    }
    if self_normalize && mass > 0.0 {
        acc.iter_mut().for_each(|v| *v /= mass);
    }
    Ok(acc)
}

/// `μ_b + σ g` with `g ~ N(0, I)` drawn from a dedicated stream.
pub fn perturb_moments(target: &[f64], sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::Config("moment noise sigma must be nonnegative".into()));
    }
    if sigma == 0.0 {
        return Ok(target.to_vec());
    }
    let mut rng = StreamKey::new(seed, Purpose::Moments).rng();
    Ok(target
        .iter()
        .map(|m| {
            let g: f64 = rng.sample(StandardNormal);
            m + sigma * g
        })
        .collect())
}
