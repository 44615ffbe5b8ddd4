//! Two-stage selection: one-off enrollment driven by pre-enrollment
//! covariates `z`, then per-round participation of enrolled clients driven by
//! `z` and pre-round covariates `x`.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::{dot, sigmoid, RowMatrix};
use crate::rng::{Purpose, StreamKey};
use crate::synthgen::ClientRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionSpec {
    pub enroll_intercept: f64,
    pub enroll_coef: Vec<f64>,
    /// Multiplies `enroll_coef`; zero disables covariate-driven enrollment.
    pub bias_scale: f64,
    pub part_intercept: f64,
    pub part_coef_z: Vec<f64>,
    pub part_coef_x: Vec<f64>,
    pub preround_dim: usize,
    /// Coupling of `x` to `z`: `x_k = preround_mix * z_k + noise` for `k < d_z`.
    pub preround_mix: f64,
}

impl Default for SelectionSpec {
    fn default() -> Self {
        Self {
            enroll_intercept: 0.0,
            enroll_coef: vec![1.0, 0.5],
            bias_scale: 1.0,
            part_intercept: -0.5,
            part_coef_z: vec![0.75, 0.0],
            part_coef_x: vec![0.5, -0.5],
            preround_dim: 2,
            preround_mix: 0.0,
        }
    }
}

impl SelectionSpec {
    pub fn validate(&self, covariate_dim: usize) -> Result<()> {
        if self.enroll_coef.len() != covariate_dim || self.part_coef_z.len() != covariate_dim {
            return Err(Error::Config(
                "enrollment and participation z-coefficients must have covariate_dim entries".into(),
            ));
        }
        if self.preround_dim == 0 || self.part_coef_x.len() != self.preround_dim {
            return Err(Error::Config(
                "part_coef_x must have preround_dim (> 0) entries".into(),
            ));
        }
        if !(self.bias_scale >= 0.0) {
            return Err(Error::Config("bias_scale must be nonnegative".into()));
        }
        Ok(())
    }
}

fn expect_len(v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: v.len(),
        });
    }
    Ok(())
}

/// `P(E = 1 | z) = sigmoid(α₀ + s⟨α, z⟩)`. Does not see pre-round covariates.
pub fn enrollment_probability(spec: &SelectionSpec, z: &[f64]) -> Result<f64> {
    expect_len(z, spec.enroll_coef.len())?;
    Ok(sigmoid(
        spec.enroll_intercept + spec.bias_scale * dot(&spec.enroll_coef, z),
    ))
}

/// `P(A = 1 | E = 1, z, x) = sigmoid(β₀ + ⟨β_z, z⟩ + ⟨β_x, x⟩)`
pub fn participation_probability(spec: &SelectionSpec, z: &[f64], x: &[f64]) -> Result<f64> {
    expect_len(z, spec.part_coef_z.len())?;
    expect_len(x, spec.part_coef_x.len())?;
    Ok(sigmoid(
        spec.part_intercept + dot(&spec.part_coef_z, z) + dot(&spec.part_coef_x, x),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Enrollment {
    pub enrolled: Vec<bool>,
    pub prob: Vec<f64>,
}

impl Enrollment {
    pub fn count(&self) -> usize {
        self.enrolled.iter().filter(|&&e| e).count()
    }

    pub fn enrolled_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.enrolled
            .iter()
            .enumerate()
            .filter_map(|(i, &e)| e.then_some(i))
    }
}

/// Independent Bernoulli enrollment, one stream per client.
pub fn draw_enrollment(
    spec: &SelectionSpec,
    pop: &[ClientRecord],
    seed: u64,
) -> Result<Enrollment> {
    let prob = pop
        .iter()
        .map(|c| enrollment_probability(spec, &c.z))
        .collect::<Result<Vec<_>>>()?;
    let enrolled = pop
        .iter()
        .zip(&prob)
        .map(|(c, &p)| {
            StreamKey::new(seed, Purpose::Enroll)
                .client(c.id)
                .rng()
                .random_bool(p)
        })
        .collect();
    Ok(Enrollment { enrolled, prob })
}

/// One round of participation.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundDraw {
    pub round: usize,
    /// `N x d_x`
    pub preround: RowMatrix,
    pub participated: Vec<bool>,
    pub part_prob: Vec<f64>,
    /// `π_enroll · π_part`
    pub inclusion: Vec<f64>,
}

impl RoundDraw {
    /// Participant ids in ascending order.
    pub fn participants(&self) -> Vec<usize> {
        self.participated
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }
}

pub fn draw_round(
    spec: &SelectionSpec,
    pop: &[ClientRecord],
    enrollment: &Enrollment,
    round: usize,
    seed: u64,
) -> Result<RoundDraw> {
    if enrollment.enrolled.len() != pop.len() {
        return Err(Error::Dimension {
            expected: pop.len(),
            actual: enrollment.enrolled.len(),
        });
    }
    let dx = spec.preround_dim;
    let mut preround = RowMatrix::zeros(pop.len(), dx);
    let mut participated = vec![false; pop.len()];
    let mut part_prob = Vec::with_capacity(pop.len());
    let mut inclusion = Vec::with_capacity(pop.len());
    for (i, c) in pop.iter().enumerate() {
        let x = preround.row_mut(i);
        let mut rng = StreamKey::new(seed, Purpose::Preround)
            .round(round)
            .client(c.id)
            .rng();
        for (k, xk) in x.iter_mut().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            let coupled = c.z.get(k).map_or(0.0, |zk| spec.preround_mix * zk);
            *xk = coupled + noise;
        }
        let pp = participation_probability(spec, &c.z, preround.row(i))?;
        if enrollment.enrolled[i] {
            participated[i] = StreamKey::new(seed, Purpose::Participate)
                .round(round)
                .client(c.id)
                .rng()
                .random_bool(pp);
        }
        part_prob.push(pp);
        inclusion.push(enrollment.prob[i] * pp);
    }
    Ok(RoundDraw {
        round,
        preround,
        participated,
        part_prob,
        inclusion,
    })
}

/// Enrollment plus every round drawn so far.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionTrace {
    pub enrollment: Enrollment,
    pub rounds: Vec<RoundDraw>,
}

impl SelectionTrace {
    /// Draws enrollment and rounds `1..=rounds`.
    pub fn simulate(
        spec: &SelectionSpec,
        pop: &[ClientRecord],
        rounds: usize,
        seed: u64,
    ) -> Result<Self> {
        if let Some(c) = pop.first() {
            spec.validate(c.z.len())?;
        }
        let enrollment = draw_enrollment(spec, pop, seed)?;
        let rounds = (1..=rounds)
            .map(|r| draw_round(spec, pop, &enrollment, r, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { enrollment, rounds })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::logit;
    use crate::synthgen::{generate_population, PopulationSpec};
    use approx::assert_relative_eq;

    fn pop(n: usize, seed: u64) -> Vec<ClientRecord> {
        generate_population(&PopulationSpec {
            num_clients: n,
            samples_per_client: 1,
            master_seed: seed,
            ..PopulationSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn enrollment_link() {
        let mut spec = SelectionSpec {
            bias_scale: 0.0,
            ..SelectionSpec::default()
        };
        assert_eq!(enrollment_probability(&spec, &[3.0, -1.0]).unwrap(), 0.5);
        spec.enroll_intercept = logit(0.8);
        assert_relative_eq!(enrollment_probability(&spec, &[3.0, -1.0]).unwrap(), 0.8, epsilon = 1e-15);
        assert!(enrollment_probability(&spec, &[1.0]).is_err());
    }

    #[test]
    fn enrollment_monotone_in_index() {
        let spec = SelectionSpec {
            enroll_coef: vec![1.0, 0.0],
            ..SelectionSpec::default()
        };
        let mut last = 0.0;
        for k in -50..=50 {
            let p = enrollment_probability(&spec, &[k as f64 * 0.1, 0.0]).unwrap();
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn participation_link() {
        let mut spec = SelectionSpec {
            part_intercept: 0.0,
            part_coef_z: vec![0.0; 2],
            part_coef_x: vec![0.0; 2],
            ..SelectionSpec::default()
        };
        assert_eq!(participation_probability(&spec, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.5);
        spec.part_intercept = logit(0.25);
        assert_relative_eq!(
            participation_probability(&spec, &[1.0, 2.0], &[3.0, 4.0]).unwrap(),
            0.25,
            epsilon = 1e-15
        );
        assert!(participation_probability(&spec, &[1.0, 2.0], &[3.0]).is_err());
    }

    #[test]
    fn probabilities_stay_inside_unit_interval() {
        let spec = SelectionSpec {
            enroll_intercept: 1e6,
            part_intercept: -1e6,
            ..SelectionSpec::default()
        };
        let pe = enrollment_probability(&spec, &[0.0, 0.0]).unwrap();
        let pp = participation_probability(&spec, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(pe < 1.0 && pe > 1.0 - 1e-12);
        assert!(pp > 0.0 && pp < 1e-12);
    }

    #[test]
    fn forced_enrollment_enrolls_everyone() {
        let p = pop(200, 1);
        let spec = SelectionSpec {
            enroll_intercept: 1e3,
            ..SelectionSpec::default()
        };
        let e = draw_enrollment(&spec, &p, 9).unwrap();
        assert_eq!(e.count(), 200);
    }

    #[test]
    fn enrollment_is_deterministic() {
        let p = pop(300, 2);
        let spec = SelectionSpec::default();
        assert_eq!(
            draw_enrollment(&spec, &p, 5).unwrap(),
            draw_enrollment(&spec, &p, 5).unwrap()
        );
        assert_ne!(
            draw_enrollment(&spec, &p, 5).unwrap().enrolled,
            draw_enrollment(&spec, &p, 6).unwrap().enrolled
        );
    }

    #[test]
    fn non_enrolled_never_participate() {
        let p = pop(300, 3);
        let spec = SelectionSpec {
            part_intercept: 5.0,
            ..SelectionSpec::default()
        };
        let trace = SelectionTrace::simulate(&spec, &p, 20, 4).unwrap();
        for round in &trace.rounds {
            for i in 0..p.len() {
                assert!(!round.participated[i] || trace.enrollment.enrolled[i]);
                assert_eq!(round.inclusion[i], trace.enrollment.prob[i] * round.part_prob[i]);
            }
        }
    }

    #[test]
    fn inclusion_is_product() {
        let p = pop(1, 0);
        let spec = SelectionSpec {
            enroll_intercept: logit(0.8),
            bias_scale: 0.0,
            part_intercept: 0.0,
            part_coef_z: vec![0.0; 2],
            part_coef_x: vec![0.0; 2],
            ..SelectionSpec::default()
        };
        let e = draw_enrollment(&spec, &p, 0).unwrap();
        let r = draw_round(&spec, &p, &e, 1, 0).unwrap();
        assert_relative_eq!(r.inclusion[0], 0.4, epsilon = 1e-15);
    }

    #[test]
    fn preround_mix_couples_x_to_z() {
        let p = pop(2000, 8);
        let spec = SelectionSpec {
            preround_mix: 1.0,
            ..SelectionSpec::default()
        };
        let e = draw_enrollment(&spec, &p, 0).unwrap();
        let r = draw_round(&spec, &p, &e, 1, 0).unwrap();
        let cov: f64 = p
            .iter()
            .enumerate()
            .map(|(i, c)| c.z[0] * r.preround.row(i)[0])
            .sum::<f64>()
            / p.len() as f64;
        assert!((cov - 1.0).abs() < 0.15, "{cov}");
    }
}
