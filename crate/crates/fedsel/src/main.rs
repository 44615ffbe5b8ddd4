use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsel::config::{ConfigError, ExperimentConfig};
use fedsel::output::{float, write_report};
use fedsel::panels::{Experiment, ExperimentReport, Metric, Panel};
use fedsel::verify::run_verification_suite;
use fedsel_core::federation::Method;

/// Environment variable that overrides the configured master seed.
const SEED_ENV: &str = "FEDSEL_SEED";

#[derive(Parser)]
#[command(name = "fedsel", version, about = "Two-stage selection experiments for federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment panel and write its CSVs.
    Run {
        #[arg(long, value_parser = parse_panel)]
        panel: Panel,
        /// TOML config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the analytical and invariant checks.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sweep one numeric parameter over the configured methods.
    Sweep {
        /// Dotted parameter name, e.g. `selection.bias_scale`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_panel(s: &str) -> Result<Panel, String> {
    s.parse()
}

enum Failure {
    Config(String),
    Check(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<ConfigError>() {
            Some(c) => Failure::Config(c.to_string()),
            None => Failure::Check(format!("{e:#}")),
        }
    }
}

fn load(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    let mut config = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(raw) = std::env::var(SEED_ENV) {
        config.seed = raw
            .trim()
            .parse()
            .map_err(|_| Failure::Config(format!("{SEED_ENV}={raw} is not an unsigned integer")))?;
        config.validate()?;
    }
    Ok(config)
}

fn print_summary(report: &ExperimentReport) {
    let f_star = report.oracle.f_star;
    println!("{}: F* = {f_star}", report.experiment);
    println!(
        "{:>12} {:>16} {:>14} {:>12} {:>12} {:>12}",
        "sweep", "method", "loss - F*", "sd", "dist", "sd"
    );
    for sv in report.sweep_values() {
        for m in Method::ALL {
            let loss = report.summary(m, sv, Metric::TargetLoss);
            if loss.n == 0 {
                continue;
            }
            let dist = report.summary(m, sv, Metric::DistToOpt);
            let sweep = sv.map_or_else(|| "-".to_owned(), |v| v.to_string());
            println!(
                "{sweep:>12} {:>16} {:>14.6e} {:>12.3e} {:>12.4} {:>12.4}",
                m.name(),
                loss.mean - f_star,
                loss.sd,
                dist.mean,
                dist.sd
            );
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { panel, config, out } => {
            let config = load(config.as_deref())?;
            let out = out.unwrap_or_else(|| PathBuf::from(&config.output_dir));
            let experiment = Experiment::new(config)?;
            let report = experiment.run_panel(panel)?;
            write_report(&out.join(panel.id()), &report)?;
            print_summary(&report);
        }
        Command::Verify { config, report } => {
            let config = load(config.as_deref())?;
            let result = run_verification_suite(&config);
            for c in &result.checks {
                let flag = if c.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{flag} {:<40} expected {:<22} actual {:<24} tol {}",
                    c.name,
                    float(c.expected),
                    float(c.actual),
                    float(c.tolerance)
                );
            }
            if let Some(path) = report {
                let file = std::fs::File::create(&path).map_err(anyhow::Error::from)?;
                result.write_csv(file).map_err(anyhow::Error::from)?;
            }
            let failed = result.failures().count();
            if failed > 0 {
                return Err(Failure::Check(format!("{failed} of {} checks failed", result.checks.len())));
            }
            println!("all {} checks passed", result.checks.len());
        }
        Command::Sweep {
            param,
            values,
            config,
            out,
        } => {
            let config = load(config.as_deref())?;
            if values.is_empty() {
                return Err(Failure::Config("--values needs at least one value".into()));
            }
            for &v in &values {
                config.with_param(&param, v)?;
            }
            let out = out.unwrap_or_else(|| PathBuf::from(&config.output_dir));
            let experiment = Experiment::new(config)?;
            let report = experiment.run_sweep(&param, &values)?;
            write_report(&out.join("sweep"), &report)?;
            print_summary(&report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
    }
}
