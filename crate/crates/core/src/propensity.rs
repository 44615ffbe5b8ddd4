//! Propensity models for the two selection stages.
//!
//! Enrollment is fitted once on `(z_i, E_i)` over the whole population.
//! Participation is refitted every round on stacked `(z_i ⊕ x_{i,r}, A_{i,r})`
//! rows of enrolled clients over a trailing window of rounds. The plug-in
//! inclusion probability is the product of the two clipped predictions.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::linalg::{dot, log1p_exp, norm_inf, sigmoid, solve_spd, RowMatrix};
use crate::selection::{Enrollment, SelectionTrace};
use crate::synthgen::ClientRecord;
use crate::{Error, Result};

pub const DEFAULT_CLIP_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub ridge: f64,
    pub clip_floor: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl LogisticFit {
    /// A fit with known parameters, e.g. the true selection model.
    pub fn from_params(intercept: f64, coefficients: Vec<f64>) -> Self {
        Self {
            intercept,
            coefficients,
            ridge: 0.0,
            clip_floor: DEFAULT_CLIP_FLOOR,
            converged: true,
            iterations: 0,
        }
    }

    pub fn with_clip_floor(mut self, clip_floor: f64) -> Self {
        self.clip_floor = clip_floor;
        self
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.intercept + dot(&self.coefficients, x)
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.linear_predictor(x))
    }

    pub fn predict_clipped(&self, x: &[f64]) -> f64 {
        self.predict(x).clamp(self.clip_floor, 1.0)
    }
}

/// Penalized negative log-likelihood; every parameter, intercept included,
/// carries the ridge penalty.
fn penalized_nll(features: &RowMatrix, labels: &[bool], params: &[f64], ridge: f64) -> f64 {
    let (b0, beta) = params.split_first().expect("intercept present");
    let nll: f64 = features
        .iter_rows()
        .zip(labels)
        .map(|(x, &y)| {
            let s = b0 + dot(beta, x);
            log1p_exp(s) - if y { s } else { 0.0 }
        })
        .sum();
    nll + 0.5 * ridge * dot(params, params)
}

fn irls(
    features: &RowMatrix,
    labels: &[bool],
    ridge: f64,
    tol: f64,
    max_iter: usize,
    init: Vec<f64>,
) -> Result<LogisticFit> {
    let d = features.cols() + 1;
    let mut params = init;
    let mut objective = penalized_nll(features, labels, &params, ridge);
    let mut converged = false;
    let mut iterations = 0;
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    while iterations < max_iter {
        iterations += 1;
        grad.fill(0.0);
        hess.fill(0.0);
        for (x, &y) in features.iter_rows().zip(labels) {
            let s = params[0] + dot(&params[1..], x);
            let p = crate::linalg::logistic(s);
            let r = p - if y { 1.0 } else { 0.0 };
            let w = p * (1.0 - p);
            grad[0] += r;
            hess[0] += w;
            for a in 0..x.len() {
                grad[a + 1] += r * x[a];
                let wa = w * x[a];
                hess[a + 1] += wa;
                for b in a..x.len() {
                    hess[(a + 1) * d + b + 1] += wa * x[b];
                }
            }
        }
        for a in 0..d {
            grad[a] += ridge * params[a];
            hess[a * d + a] += ridge;
            for b in 0..a {
                hess[a * d + b] = hess[b * d + a];
            }
        }
        let step = solve_spd(d, &hess, &grad)
            .map_err(|_| Error::Singular("IRLS weighted normal equations"))?;

        // step halving keeps the penalized likelihood monotone
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = params.iter().zip(&step).map(|(p, s)| p - t * s).collect();
            let obj = penalized_nll(features, labels, &cand, ridge);
            if obj <= objective {
                accepted = Some((cand, obj));
                break;
            }
            t *= 0.5;
        }
        let step_size = t * norm_inf(&step);
        match accepted {
            Some((cand, obj)) => {
                params = cand;
                objective = obj;
            }
            None => {
                converged = norm_inf(&step) < math::sqrt(tol);
                break;
            }
        }
        if step_size < tol {
            converged = true;
            break;
        }
    }
    let intercept = params[0];
    Ok(LogisticFit {
        intercept,
        coefficients: params.split_off(1),
        ridge,
        clip_floor: DEFAULT_CLIP_FLOOR,
        converged,
        iterations,
    })
}

/// Ridge-penalized logistic regression by iteratively reweighted least
/// squares. Converged when the accepted step's ∞-norm drops below `tol`;
/// otherwise the last iterate is returned with `converged = false`.
pub fn fit_logistic(
    features: &RowMatrix,
    labels: &[bool],
    ridge: f64,
    tol: f64,
    max_iter: usize,
) -> Result<LogisticFit> {
    fit_logistic_from(features, labels, ridge, tol, max_iter, None)
}

/// [`fit_logistic`] warm-started from `init`.
pub fn fit_logistic_from(
    features: &RowMatrix,
    labels: &[bool],
    ridge: f64,
    tol: f64,
    max_iter: usize,
    init: Option<&LogisticFit>,
) -> Result<LogisticFit> {
    if features.rows() == 0 {
        return Err(Error::DegenerateData("no samples"));
    }
    if labels.len() != features.rows() {
        return Err(Error::Dimension {
            expected: features.rows(),
            actual: labels.len(),
        });
    }
    if !(ridge > 0.0) {
        return Err(Error::Config("logistic ridge must be positive".into()));
    }
    let start = match init {
        Some(f) if f.coefficients.len() == features.cols() => {
            let mut v = vec![f.intercept];
            v.extend_from_slice(&f.coefficients);
            v
        }
        _ => vec![0.0; features.cols() + 1],
    };
    irls(features, labels, ridge, tol, max_iter, start)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityConfig {
    pub ridge: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub clip_floor: f64,
    /// Trailing rounds used for each participation refit.
    pub window: usize,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-6,
            tol: 1e-8,
            max_iter: 50,
            clip_floor: DEFAULT_CLIP_FLOOR,
            window: 50,
        }
    }
}

impl PropensityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_floor > 0.0 && self.clip_floor < 0.5) {
            return Err(Error::Config("clip_floor must lie in (0, 0.5)".into()));
        }
        if !(self.ridge > 0.0) || !(self.tol > 0.0) || self.max_iter == 0 || self.window == 0 {
            return Err(Error::Config(
                "propensity ridge, tol, max_iter and window must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Enrollment model on pre-enrollment covariates only.
pub fn fit_enrollment_model(
    pop: &[ClientRecord],
    enrollment: &Enrollment,
    config: &PropensityConfig,
) -> Result<LogisticFit> {
    let enrolled = enrollment.count();
    if enrolled == 0 || enrolled == pop.len() {
        return Err(Error::DegenerateData(
            "enrollment model needs both enrolled and non-enrolled clients",
        ));
    }
    let z = RowMatrix::from_rows(&pop.iter().map(|c| c.z.as_slice()).collect::<Vec<_>>())?;
    Ok(fit_logistic(&z, &enrollment.enrolled, config.ridge, config.tol, config.max_iter)?
        .with_clip_floor(config.clip_floor))
}

/// Stacked `(z ⊕ x, A)` rows of enrolled clients for rounds in
/// `rounds[first..=last]` (indices into `trace.rounds`).
pub fn participation_design(
    pop: &[ClientRecord],
    trace: &SelectionTrace,
    first: usize,
    last: usize,
) -> Result<(RowMatrix, Vec<bool>)> {
    let dz = pop.first().map_or(0, |c| c.z.len());
    let dx = trace.rounds.first().map_or(0, |r| r.preround.cols());
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for round in &trace.rounds[first..=last] {
        for i in trace.enrollment.enrolled_ids() {
            data.extend_from_slice(&pop[i].z);
            data.extend_from_slice(round.preround.row(i));
            labels.push(round.participated[i]);
        }
    }
    let rows = labels.len();
    Ok((RowMatrix::from_vec(rows, dz + dx, data)?, labels))
}

/// Participation model on the trailing `window` rounds ending at round index
/// `last` (0-based into `trace.rounds`).
pub fn fit_participation_model(
    pop: &[ClientRecord],
    trace: &SelectionTrace,
    last: usize,
    config: &PropensityConfig,
    warm_start: Option<&LogisticFit>,
) -> Result<LogisticFit> {
    if last >= trace.rounds.len() {
        return Err(Error::Invariant(alloc::format!(
            "round index {last} beyond trace of {} rounds",
            trace.rounds.len()
        )));
    }
    let first = (last + 1).saturating_sub(config.window);
    let (design, labels) = participation_design(pop, trace, first, last)?;
    let positives = labels.iter().filter(|&&a| a).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::DegenerateData(
            "participation model needs both participating and absent enrolled rows",
        ));
    }
    Ok(fit_logistic_from(
        &design,
        &labels,
        config.ridge,
        config.tol,
        config.max_iter,
        warm_start,
    )?
    .with_clip_floor(config.clip_floor))
}

/// A fitted model, or a constant rate when fitting was impossible.
#[derive(Debug, Clone, PartialEq)]
pub enum PropensityModel {
    Logistic(LogisticFit),
    Constant { prob: f64, clip_floor: f64 },
}

impl PropensityModel {
    pub fn predict_clipped(&self, x: &[f64]) -> f64 {
        match self {
            Self::Logistic(fit) => fit.predict_clipped(x),
            Self::Constant { prob, clip_floor } => prob.clamp(*clip_floor, 1.0),
        }
    }

    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        match self {
            Self::Logistic(fit) => fit.predict(x),
            Self::Constant { prob, .. } => *prob,
        }
    }

    pub fn as_fit(&self) -> Option<&LogisticFit> {
        match self {
            Self::Logistic(fit) => Some(fit),
            Self::Constant { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InclusionEstimate {
    pub p_hat: Vec<f64>,
    pub enroll_hat: Vec<f64>,
    pub part_hat: Vec<f64>,
}

/// `p̂_i = clip(π̂_enroll,i) · clip(π̂_part,i)` for every client.
pub fn plug_in_inclusion(
    enroll: &PropensityModel,
    part: &PropensityModel,
    pop: &[ClientRecord],
    preround: &RowMatrix,
) -> InclusionEstimate {
    let mut zx = Vec::new();
    let mut est = InclusionEstimate {
        p_hat: Vec::with_capacity(pop.len()),
        enroll_hat: Vec::with_capacity(pop.len()),
        part_hat: Vec::with_capacity(pop.len()),
    };
    for (i, c) in pop.iter().enumerate() {
        zx.clear();
        zx.extend_from_slice(&c.z);
        zx.extend_from_slice(preround.row(i));
        let e = enroll.predict_clipped(&c.z);
        let p = part.predict_clipped(&zx);
        est.enroll_hat.push(e);
        est.part_hat.push(p);
        est.p_hat.push(e * p);
    }
    est
}

/// Propensity estimates for every round of a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensitySchedule {
    pub enroll_model: PropensityModel,
    pub part_models: Vec<PropensityModel>,
    pub estimates: Vec<InclusionEstimate>,
}

impl PropensitySchedule {
    /// Fits enrollment once, then participation every round on the trailing
    /// window. A failed fit falls back to the previous round's model, or to
    /// the sample rate when there is none.
    pub fn estimate(
        pop: &[ClientRecord],
        trace: &SelectionTrace,
        config: &PropensityConfig,
    ) -> Result<Self> {
        config.validate()?;
        let enroll_model = match fit_enrollment_model(pop, &trace.enrollment, config) {
            Ok(fit) => PropensityModel::Logistic(fit),
            Err(Error::DegenerateData(_)) | Err(Error::Singular(_)) => PropensityModel::Constant {
                prob: trace.enrollment.count() as f64 / pop.len().max(1) as f64,
                clip_floor: config.clip_floor,
            },
            Err(e) => return Err(e),
        };
        let mut part_models: Vec<PropensityModel> = Vec::with_capacity(trace.rounds.len());
        let mut estimates = Vec::with_capacity(trace.rounds.len());
        for (r, round) in trace.rounds.iter().enumerate() {
            let prev = part_models.last();
            let warm = prev.and_then(PropensityModel::as_fit);
            let model = match fit_participation_model(pop, trace, r, config, warm) {
                Ok(fit) => PropensityModel::Logistic(fit),
                Err(Error::DegenerateData(_)) | Err(Error::Singular(_)) => match prev {
                    Some(m) => m.clone(),
                    None => PropensityModel::Constant {
                        prob: sample_participation_rate(trace, r, config.window),
                        clip_floor: config.clip_floor,
                    },
                },
                Err(e) => return Err(e),
            };
            estimates.push(plug_in_inclusion(&enroll_model, &model, pop, &round.preround));
            part_models.push(model);
        }
        Ok(Self {
            enroll_model,
            part_models,
            estimates,
        })
    }
}

fn sample_participation_rate(trace: &SelectionTrace, last: usize, window: usize) -> f64 {
    let first = (last + 1).saturating_sub(window);
    let (mut hits, mut total) = (0usize, 0usize);
    for round in &trace.rounds[first..=last] {
        for i in trace.enrollment.enrolled_ids() {
            total += 1;
            hits += usize::from(round.participated[i]);
        }
    }
    if total == 0 {
        0.5
    } else {
        hits as f64 / total as f64
    }
}
