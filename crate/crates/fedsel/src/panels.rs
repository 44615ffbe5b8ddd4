//! The four experiment panels and generic parameter sweeps.

use std::fmt;
use std::str::FromStr;

use fedsel_core::calibration::{perturb_moments, population_moments, CalibrationOutcome};
use fedsel_core::federation::{
    run_prepared, CalibrationSetup, Method, MethodConfig, PreparedSelection, TrainingRun,
};
use fedsel_core::rng::{derive_seed, Purpose};
use fedsel_core::synthgen::{generate_population, solve_target_optimum, ClientRecord, OracleSolution};
use serde::Serialize;

use crate::config::{ConfigError, ExperimentConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Panel {
    A,
    B,
    C,
    D,
}

impl Panel {
    pub const ALL: [Panel; 4] = [Panel::A, Panel::B, Panel::C, Panel::D];

    pub fn id(self) -> &'static str {
        match self {
            Panel::A => "panel_a",
            Panel::B => "panel_b",
            Panel::C => "panel_c",
            Panel::D => "panel_d",
        }
    }
}

impl FromStr for Panel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Panel::A),
            "b" => Ok(Panel::B),
            "c" => Ok(Panel::C),
            "d" => Ok(Panel::D),
            _ => Err(format!("unknown panel `{s}` (expected a, b, c or d)")),
        }
    }
}

impl fmt::Display for Panel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// One long-format metrics row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub replication: usize,
    pub sweep_param: String,
    pub sweep_value: Option<f64>,
    pub round: usize,
    pub method: String,
    pub target_loss: f64,
    pub dist_to_opt: f64,
    pub participants: usize,
    pub mean_weight: f64,
    pub max_rho_err: f64,
}

/// Final-round outcome of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalOutcome {
    pub replication: usize,
    pub sweep_value: Option<f64>,
    pub method: Method,
    pub target_loss: f64,
    pub dist_to_opt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationRecord {
    pub experiment: String,
    pub replication: usize,
    pub sweep_value: Option<f64>,
    pub outcome: CalibrationOutcomeRow,
    #[serde(skip)]
    pub weights: Vec<(usize, f64, bool)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationOutcomeRow {
    pub constraint_residual: f64,
    pub slack_norm: f64,
    pub active_set_size: usize,
}

impl CalibrationOutcomeRow {
    fn from_outcome(o: &CalibrationOutcome) -> Self {
        Self {
            constraint_residual: o.weights.constraint_residual,
            slack_norm: o.slack_norm,
            active_set_size: o.active_set_size(),
        }
    }
}

/// Everything a panel or sweep produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub experiment: String,
    pub sweep_param: String,
    pub rows: Vec<MetricsRow>,
    pub finals: Vec<FinalOutcome>,
    pub calibrations: Vec<CalibrationRecord>,
    /// Selection draws of replication 0 at the first sweep point.
    pub first_selection: Option<PreparedSelection>,
    pub oracle: OracleSolution,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary { mean, sd, n }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    TargetLoss,
    DistToOpt,
}

impl ExperimentReport {
    pub fn final_values(&self, method: Method, sweep_value: Option<f64>, metric: Metric) -> Vec<f64> {
        let mut v: Vec<(usize, f64)> = self
            .finals
            .iter()
            .filter(|f| f.method == method && f.sweep_value == sweep_value)
            .map(|f| {
                let x = match metric {
                    Metric::TargetLoss => f.target_loss,
                    Metric::DistToOpt => f.dist_to_opt,
                };
                (f.replication, x)
            })
            .collect();
        v.sort_by_key(|(r, _)| *r);
        v.into_iter().map(|(_, x)| x).collect()
    }

    pub fn summary(&self, method: Method, sweep_value: Option<f64>, metric: Metric) -> Summary {
        summarize(&self.final_values(method, sweep_value, metric))
    }

    /// Replication-paired difference `a − b` of final values.
    pub fn paired_gap(&self, a: Method, b: Method, sweep_value: Option<f64>, metric: Metric) -> Summary {
        let va = self.final_values(a, sweep_value, metric);
        let vb = self.final_values(b, sweep_value, metric);
        let d: Vec<f64> = va.iter().zip(&vb).map(|(x, y)| x - y).collect();
        summarize(&d)
    }

    pub fn sweep_values(&self) -> Vec<Option<f64>> {
        let mut out: Vec<Option<f64>> = Vec::new();
        for f in &self.finals {
            if !out.contains(&f.sweep_value) {
                out.push(f.sweep_value);
            }
        }
        out
    }
}

/// Population, its optimum and exact balance moments; shared by every run of
/// an experiment.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub population: Vec<ClientRecord>,
    pub oracle: OracleSolution,
}

const ORACLE_TOL: f64 = 1e-12;
const ORACLE_MAX_ITER: usize = 100;

impl Experiment {
    pub fn new(config: ExperimentConfig) -> anyhow::Result<Self> {
        config.validate()?;
        let population = generate_population(&config.population_spec())?;
        let oracle = solve_target_optimum(&population, config.population.ridge, ORACLE_TOL, ORACLE_MAX_ITER)?;
        Ok(Self {
            config,
            population,
            oracle,
        })
    }

    pub fn replication_seed(&self, replication: usize) -> u64 {
        derive_seed(self.config.seed, Purpose::Replication, replication as u64)
    }

    fn method_config(config: &ExperimentConfig, method: Method, calibration: Option<CalibrationSetup>) -> MethodConfig {
        MethodConfig {
            method,
            participation_source: config.participation_source(),
            population_size: config.propensity.population_size,
            calibration,
            self_normalize: config.calibration.self_normalize,
        }
    }

    fn calibration_setup(&self, config: &ExperimentConfig, seed: u64) -> anyhow::Result<CalibrationSetup> {
        let balance_map = config.balance_map();
        let exact = population_moments(&balance_map, &self.population)?;
        let target_moments = perturb_moments(&exact, config.calibration.moment_noise_sigma, seed)?;
        Ok(CalibrationSetup {
            balance_map,
            target_moments,
        })
    }

    /// Runs every method on every replication, for each configuration in
    /// `points` (sweep value, config). Populations are shared, so only
    /// selection, training and calibration parameters may vary across points,
    /// and the replication count is taken from the first point.
    fn run_points(
        &self,
        experiment: &str,
        sweep_param: &str,
        points: &[(Option<f64>, ExperimentConfig)],
        methods: &[Method],
    ) -> anyhow::Result<ExperimentReport> {
        let mut report = ExperimentReport {
            experiment: experiment.to_owned(),
            sweep_param: sweep_param.to_owned(),
            rows: Vec::new(),
            finals: Vec::new(),
            calibrations: Vec::new(),
            first_selection: None,
            oracle: self.oracle.clone(),
        };
        let replications = points.first().map_or(0, |(_, c)| c.replications);
        for rep in 0..replications {
            let seed = self.replication_seed(rep);
            // Selection is redrawn only when its inputs change between points.
            let mut prepared: Option<(SelectionKey, PreparedSelection)> = None;
            for (point_idx, (sweep_value, config)) in points.iter().enumerate() {
                let training = config.training_config(seed);
                let key = SelectionKey::of(config);
                if prepared.as_ref().is_none_or(|(k, _)| *k != key) {
                    let fresh = PreparedSelection::new(
                        &self.population,
                        &config.selection_spec(),
                        &config.propensity_config(),
                        training.rounds,
                        seed,
                    )?;
                    prepared = Some((key, fresh));
                }
                let (_, selection) = prepared.as_ref().expect("prepared above");
                for &method in methods {
                    let calibration = match method {
                        Method::Calibrated => Some(self.calibration_setup(config, seed)?),
                        _ => None,
                    };
                    let mcfg = Self::method_config(config, method, calibration);
                    let run = run_prepared(
                        &self.population,
                        selection,
                        &training,
                        &self.oracle,
                        config.population.ridge,
                        &mcfg,
                    )?;
                    record_run(&mut report, &run, rep, *sweep_value);
                }
                if point_idx == 0 && rep == 0 {
                    report.first_selection = Some(selection.clone());
                }
            }
        }
        Ok(report)
    }

    pub fn run_panel(&self, panel: Panel) -> anyhow::Result<ExperimentReport> {
        let base = &self.config;
        match panel {
            Panel::A => {
                let methods: Vec<Method> = base.methods.iter().map(|m| m.0).collect();
                self.run_points(panel.id(), "", &[(None, base.clone())], &methods)
            }
            Panel::B => {
                let mut cfg = base.clone();
                cfg.selection.part_coef_z = base.panels.bias_panel_part_coef_z.clone();
                let points = base
                    .panels
                    .bias_scales
                    .iter()
                    .map(|&s| Ok((Some(s), cfg.with_param("selection.bias_scale", s)?)))
                    .collect::<anyhow::Result<Vec<_>>>()?;
                let methods = [Method::Naive, Method::RoundOnlyIpw, Method::FedIpw, Method::OracleIpw];
                self.run_points(panel.id(), "selection.bias_scale", &points, &methods)
            }
            Panel::C => {
                let mut cfg = base.clone();
                cfg.calibration.moment_noise_sigma = 0.0;
                let methods = [Method::RoundOnlyIpw, Method::Calibrated, Method::FedIpw];
                self.run_points(panel.id(), "", &[(None, cfg)], &methods)
            }
            Panel::D => {
                let points = base
                    .panels
                    .noise_sigmas
                    .iter()
                    .map(|&s| Ok((Some(s), base.with_param("calibration.moment_noise_sigma", s)?)))
                    .collect::<anyhow::Result<Vec<_>>>()?;
                self.run_points(panel.id(), "calibration.moment_noise_sigma", &points, &[Method::Calibrated])
            }
        }
    }

    /// Sweeps any numeric parameter outside the population section.
    pub fn run_sweep(&self, param: &str, values: &[f64]) -> anyhow::Result<ExperimentReport> {
        if param.starts_with("population.") || param == "seed" || param == "replications" {
            return Err(ConfigError::Invalid {
                key: param.to_owned(),
                reason: "cannot be swept: it changes the shared population or replication plan".into(),
            }
            .into());
        }
        let points = values
            .iter()
            .map(|&v| Ok((Some(v), self.config.with_param(param, v)?)))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let methods: Vec<Method> = self.config.methods.iter().map(|m| m.0).collect();
        self.run_points("sweep", param, &points, &methods)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SelectionKey {
    selection: crate::config::SelectionSection,
    propensity: crate::config::PropensitySection,
    rounds: usize,
}

impl SelectionKey {
    fn of(config: &ExperimentConfig) -> Self {
        Self {
            selection: config.selection.clone(),
            propensity: config.propensity.clone(),
            rounds: config.training.rounds,
        }
    }
}

fn record_run(report: &mut ExperimentReport, run: &TrainingRun, replication: usize, sweep_value: Option<f64>) {
    let method = run.method.name();
    report.rows.extend(run.metrics().iter().map(|m| MetricsRow {
        experiment: report.experiment.clone(),
        replication,
        sweep_param: report.sweep_param.clone(),
        sweep_value,
        round: m.round,
        method: method.to_owned(),
        target_loss: m.target_loss,
        dist_to_opt: m.dist_to_opt,
        participants: m.participants,
        mean_weight: m.mean_weight,
        max_rho_err: m.max_rho_err,
    }));
    if let Some(last) = run.final_metrics() {
        report.finals.push(FinalOutcome {
            replication,
            sweep_value,
            method: run.method,
            target_loss: last.target_loss,
            dist_to_opt: last.dist_to_opt,
        });
    }
    if let Some(outcome) = &run.calibration {
        let active = &outcome.weights.active_set;
        report.calibrations.push(CalibrationRecord {
            experiment: report.experiment.clone(),
            replication,
            sweep_value,
            outcome: CalibrationOutcomeRow::from_outcome(outcome),
            weights: outcome
                .weights
                .clients
                .iter()
                .zip(&outcome.weights.weights)
                .enumerate()
                .map(|(k, (&id, &q))| (id, q, active.contains(&k)))
                .collect(),
        });
    }
}
