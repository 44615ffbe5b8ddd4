//! Experiment configuration: a TOML file of `key = value` sections. Every
//! key is optional; missing keys take the defaults below and unknown keys are
//! rejected.

use std::path::Path;

use fedsel_core::calibration::{BalanceMap, IndicatorBins};
use fedsel_core::federation::{BatchSize, Method, PropensitySource, TrainingConfig};
use fedsel_core::linalg::RowMatrix;
use fedsel_core::propensity::PropensityConfig;
use fedsel_core::selection::SelectionSpec;
use fedsel_core::synthgen::PopulationSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

impl ConfigError {
    fn invalid(key: &str, reason: impl Into<String>) -> Self {
        Self::Invalid {
            key: key.to_owned(),
            reason: reason.into(),
        }
    }
}

/// A method name as written in the config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MethodName(pub Method);

impl TryFrom<String> for MethodName {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        Method::parse(&s).map(MethodName).ok_or_else(|| {
            let known: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            format!("unknown method `{s}` (known: {})", known.join(", "))
        })
    }
}

impl From<MethodName> for String {
    fn from(m: MethodName) -> Self {
        m.0.name().to_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub replications: usize,
    pub output_dir: String,
    /// Methods compared in panel A and by `sweep`.
    pub methods: Vec<MethodName>,
    pub population: PopulationSection,
    pub selection: SelectionSection,
    pub training: TrainingSection,
    pub propensity: PropensitySection,
    pub calibration: CalibrationSection,
    pub panels: PanelSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            replications: 10,
            output_dir: "results".into(),
            methods: [Method::Naive, Method::RoundOnlyIpw, Method::FedIpw, Method::OracleIpw]
                .into_iter()
                .map(MethodName)
                .collect(),
            population: PopulationSection::default(),
            selection: SelectionSection::default(),
            training: TrainingSection::default(),
            propensity: PropensitySection::default(),
            calibration: CalibrationSection::default(),
            panels: PanelSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationSection {
    pub num_clients: usize,
    pub covariate_dim: usize,
    pub feature_dim: usize,
    pub samples_per_client: usize,
    pub base_param: Vec<f64>,
    /// One row per feature, one column per covariate.
    pub heterogeneity: Vec<Vec<f64>>,
    pub ridge: f64,
}

impl Default for PopulationSection {
    fn default() -> Self {
        let spec = PopulationSpec::default();
        Self {
            num_clients: spec.num_clients,
            covariate_dim: spec.covariate_dim,
            feature_dim: spec.feature_dim,
            samples_per_client: spec.samples_per_client,
            base_param: spec.base_param.clone(),
            heterogeneity: spec.heterogeneity.iter_rows().map(<[f64]>::to_vec).collect(),
            ridge: spec.ridge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSection {
    pub enroll_intercept: f64,
    pub enroll_coef: Vec<f64>,
    pub bias_scale: f64,
    pub part_intercept: f64,
    pub part_coef_z: Vec<f64>,
    pub part_coef_x: Vec<f64>,
    pub preround_dim: usize,
    pub preround_mix: f64,
}

impl Default for SelectionSection {
    fn default() -> Self {
        let s = SelectionSpec::default();
        Self {
            enroll_intercept: s.enroll_intercept,
            enroll_coef: s.enroll_coef,
            bias_scale: s.bias_scale,
            part_intercept: s.part_intercept,
            part_coef_z: s.part_coef_z,
            part_coef_x: s.part_coef_x,
            preround_dim: s.preround_dim,
            preround_mix: s.preround_mix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub local_steps: usize,
    pub local_step_size: f64,
    pub server_step_size: f64,
    pub rounds: usize,
    /// Minibatch size; 0 means full-batch local gradients.
    pub batch_size: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            local_steps: t.local_steps,
            local_step_size: t.local_step_size,
            server_step_size: t.server_step_size,
            rounds: t.rounds,
            batch_size: match t.batch_size {
                BatchSize::Full => 0,
                BatchSize::Mini(b) => b,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SourceName {
    #[default]
    Estimated,
    True,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropensitySection {
    pub ridge: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub clip_floor: f64,
    /// Trailing rounds pooled by each participation refit.
    pub window: usize,
    pub participation_source: SourceName,
    /// Replaces the true population size in the FedIPW divisor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub population_size: Option<f64>,
}

impl Default for PropensitySection {
    fn default() -> Self {
        let p = PropensityConfig::default();
        Self {
            ridge: p.ridge,
            tol: p.tol,
            max_iter: p.max_iter,
            clip_floor: p.clip_floor,
            window: p.window,
            participation_source: SourceName::Estimated,
            population_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    /// Balance the raw covariates.
    pub identity: bool,
    /// Covariate binned into one-hot indicators; requires `bin_edges`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bin_coordinate: Option<usize>,
    pub bin_edges: Vec<f64>,
    pub moment_noise_sigma: f64,
    pub self_normalize: bool,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            identity: true,
            bin_coordinate: None,
            bin_edges: Vec::new(),
            moment_noise_sigma: 0.0,
            self_normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PanelSection {
    pub bias_scales: Vec<f64>,
    /// Participation coefficients on `z` used by the bias-scale panel, so
    /// that zero enrollment bias leaves every method unbiased.
    pub bias_panel_part_coef_z: Vec<f64>,
    pub noise_sigmas: Vec<f64>,
}

impl Default for PanelSection {
    fn default() -> Self {
        Self {
            bias_scales: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            bias_panel_part_coef_z: vec![0.0, 0.0],
            noise_sigmas: vec![0.0, 0.1, 0.3, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Dotted key of a numeric parameter, e.g. `training.local_step_size`.
    pub param: String,
    pub values: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            param: "selection.bias_scale".into(),
            values: vec![0.0, 0.5, 1.0, 1.5, 2.0],
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.span().map_or(1, |s| line_of(text, s.start)),
            message: e.message().to_owned(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config fields are all representable in TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_fields()?;
        if self.sweep.values.is_empty() {
            return Err(ConfigError::invalid("sweep.values", "must not be empty"));
        }
        self.with_param(&self.sweep.param, self.sweep.values[0])
            .map_err(|e| match e {
                ConfigError::Invalid { key, reason } if key == self.sweep.param => {
                    ConfigError::invalid("sweep.param", format!("`{key}` {reason}"))
                }
                other => other,
            })?;
        Ok(())
    }

    fn validate_fields(&self) -> Result<(), ConfigError> {
        if self.replications == 0 {
            return Err(ConfigError::invalid("replications", "must be at least 1"));
        }
        if i64::try_from(self.seed).is_err() {
            return Err(ConfigError::invalid("seed", "must fit in a signed 64-bit integer"));
        }
        if self.methods.is_empty() {
            return Err(ConfigError::invalid("methods", "must list at least one method"));
        }
        for (k, m) in self.methods.iter().enumerate() {
            if self.methods[..k].contains(m) {
                return Err(ConfigError::invalid("methods", format!("`{}` listed twice", m.0)));
            }
        }

        let p = &self.population;
        if p.base_param.len() != p.feature_dim {
            return Err(ConfigError::invalid("population.base_param", "needs feature_dim entries"));
        }
        if p.heterogeneity.len() != p.feature_dim
            || p.heterogeneity.iter().any(|r| r.len() != p.covariate_dim)
        {
            return Err(ConfigError::invalid(
                "population.heterogeneity",
                "needs feature_dim rows of covariate_dim entries",
            ));
        }
        self.population_spec()
            .validate()
            .map_err(|e| ConfigError::invalid("population", e.to_string()))?;

        let s = &self.selection;
        for (key, v) in [("selection.enroll_coef", &s.enroll_coef), ("selection.part_coef_z", &s.part_coef_z)] {
            if v.len() != p.covariate_dim {
                return Err(ConfigError::invalid(key, "needs covariate_dim entries"));
            }
        }
        if s.part_coef_x.len() != s.preround_dim {
            return Err(ConfigError::invalid("selection.part_coef_x", "needs preround_dim entries"));
        }
        if !(s.bias_scale >= 0.0) {
            return Err(ConfigError::invalid("selection.bias_scale", "must be nonnegative"));
        }
        self.selection_spec()
            .validate(p.covariate_dim)
            .map_err(|e| ConfigError::invalid("selection", e.to_string()))?;

        let t = &self.training;
        if t.rounds == 0 {
            return Err(ConfigError::invalid("training.rounds", "must be positive"));
        }
        if t.batch_size > p.samples_per_client {
            return Err(ConfigError::invalid(
                "training.batch_size",
                "exceeds population.samples_per_client",
            ));
        }
        self.training_config(self.seed)
            .validate()
            .map_err(|e| ConfigError::invalid("training", e.to_string()))?;

        let pr = &self.propensity;
        if !(pr.clip_floor > 0.0 && pr.clip_floor < 0.5) {
            return Err(ConfigError::invalid("propensity.clip_floor", "must lie in (0, 0.5)"));
        }
        if let Some(n) = pr.population_size {
            if !(n > 0.0) {
                return Err(ConfigError::invalid("propensity.population_size", "must be positive"));
            }
        }
        self.propensity_config()
            .validate()
            .map_err(|e| ConfigError::invalid("propensity", e.to_string()))?;

        let c = &self.calibration;
        if !(c.moment_noise_sigma >= 0.0) {
            return Err(ConfigError::invalid("calibration.moment_noise_sigma", "must be nonnegative"));
        }
        match c.bin_coordinate {
            Some(k) if k >= p.covariate_dim => {
                return Err(ConfigError::invalid("calibration.bin_coordinate", "exceeds covariate_dim"));
            }
            Some(_) if c.bin_edges.is_empty() => {
                return Err(ConfigError::invalid("calibration.bin_edges", "needs at least one cut point"));
            }
            None if !c.bin_edges.is_empty() => {
                return Err(ConfigError::invalid("calibration.bin_coordinate", "required with bin_edges"));
            }
            None if !c.identity => {
                return Err(ConfigError::invalid("calibration.identity", "balance map would be empty"));
            }
            _ => {}
        }
        if c.bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(ConfigError::invalid("calibration.bin_edges", "must be strictly increasing"));
        }

        let pa = &self.panels;
        if pa.bias_panel_part_coef_z.len() != p.covariate_dim {
            return Err(ConfigError::invalid("panels.bias_panel_part_coef_z", "needs covariate_dim entries"));
        }
        for (key, vals) in [("panels.bias_scales", &pa.bias_scales), ("panels.noise_sigmas", &pa.noise_sigmas)] {
            if vals.is_empty() || vals.iter().any(|v| !(*v >= 0.0)) {
                return Err(ConfigError::invalid(key, "needs one or more nonnegative values"));
            }
        }
        Ok(())
    }

    /// A copy with the numeric parameter at dotted path `name` set to
    /// `value`, revalidated.
    pub fn with_param(&self, name: &str, value: f64) -> Result<Self, ConfigError> {
        let mut table = toml::Table::try_from(self).expect("config serializes to a table");
        let mut parts = name.split('.').peekable();
        let mut cursor = &mut table;
        let leaf = loop {
            let part = parts.next().filter(|p| !p.is_empty()).ok_or_else(|| {
                ConfigError::invalid(name, "not a parameter name")
            })?;
            if parts.peek().is_none() {
                break part;
            }
            cursor = match cursor.get_mut(part) {
                Some(toml::Value::Table(t)) => t,
                _ => return Err(ConfigError::invalid(name, "no such parameter")),
            };
        };
        let slot = cursor
            .get_mut(leaf)
            .ok_or_else(|| ConfigError::invalid(name, "no such parameter"))?;
        *slot = match slot {
            toml::Value::Float(_) => toml::Value::Float(value),
            toml::Value::Integer(_) => {
                if value.fract() != 0.0 || value.abs() > 9.0e15 {
                    return Err(ConfigError::invalid(name, "takes an integer value"));
                }
                toml::Value::Integer(value as i64)
            }
            _ => return Err(ConfigError::invalid(name, "is not a numeric parameter")),
        };
        let config: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::invalid(name, e.message()))?;
        config.validate_fields()?;
        Ok(config)
    }

    pub fn population_spec(&self) -> PopulationSpec {
        let p = &self.population;
        let flat: Vec<f64> = p.heterogeneity.iter().flatten().copied().collect();
        let heterogeneity = RowMatrix::from_vec(p.heterogeneity.len(), p.covariate_dim, flat)
            .unwrap_or_else(|_| RowMatrix::zeros(0, p.covariate_dim));
        PopulationSpec {
            num_clients: p.num_clients,
            covariate_dim: p.covariate_dim,
            feature_dim: p.feature_dim,
            samples_per_client: p.samples_per_client,
            base_param: p.base_param.clone(),
            heterogeneity,
            ridge: p.ridge,
            master_seed: self.seed,
        }
    }

    pub fn selection_spec(&self) -> SelectionSpec {
        let s = &self.selection;
        SelectionSpec {
            enroll_intercept: s.enroll_intercept,
            enroll_coef: s.enroll_coef.clone(),
            bias_scale: s.bias_scale,
            part_intercept: s.part_intercept,
            part_coef_z: s.part_coef_z.clone(),
            part_coef_x: s.part_coef_x.clone(),
            preround_dim: s.preround_dim,
            preround_mix: s.preround_mix,
        }
    }

    pub fn training_config(&self, seed: u64) -> TrainingConfig {
        let t = &self.training;
        TrainingConfig {
            local_steps: t.local_steps,
            local_step_size: t.local_step_size,
            server_step_size: t.server_step_size,
            rounds: t.rounds,
            batch_size: match t.batch_size {
                0 => BatchSize::Full,
                b => BatchSize::Mini(b),
            },
            seed,
        }
    }

    pub fn propensity_config(&self) -> PropensityConfig {
        let p = &self.propensity;
        PropensityConfig {
            ridge: p.ridge,
            tol: p.tol,
            max_iter: p.max_iter,
            clip_floor: p.clip_floor,
            window: p.window,
        }
    }

    pub fn participation_source(&self) -> PropensitySource {
        match self.propensity.participation_source {
            SourceName::Estimated => PropensitySource::Estimated,
            SourceName::True => PropensitySource::True,
        }
    }

    pub fn balance_map(&self) -> BalanceMap {
        let c = &self.calibration;
        BalanceMap {
            identity: c.identity,
            bins: c.bin_coordinate.map(|coordinate| IndicatorBins {
                coordinate,
                edges: c.bin_edges.clone(),
            }),
        }
    }
}
