//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails. Criterion numbers given as
//! arguments restrict the run to those criteria.

#[path = "../../core/tests/support/grid_qp.rs"]
mod grid_qp;

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use fedsel::config::ExperimentConfig;
use fedsel::panels::{Experiment, ExperimentReport, Metric, Panel};
use fedsel_core::calibration::solve_calibration_weights;
use fedsel_core::federation::{BatchSize, Method, TrainingConfig};
use fedsel_core::linalg::{logistic, norm2, RowMatrix};
use fedsel_core::propensity::fit_logistic;
use fedsel_core::rng::{Purpose, StreamKey};
use fedsel_core::synthgen::{client_gradient, client_loss, population_gradient};
use fedsel_core::theory::{
    enumerate_ipw_expectation, expected_ipw_dynamics, two_client_gap, two_client_minimizer, Estimator,
    TwoClientInstance,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

struct Criterion {
    id: u8,
    title: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

const CRITERIA: [Criterion; 9] = [
    Criterion { id: 1, title: "oracle IPW is exactly unbiased", budget: Duration::from_secs(5), run: oracle_unbiased },
    Criterion { id: 2, title: "two-client lower bound", budget: Duration::from_secs(1), run: lower_bound },
    Criterion { id: 3, title: "participation-only bias floor", budget: Duration::from_secs(10), run: bias_floor },
    Criterion { id: 4, title: "panel A ordering", budget: Duration::from_secs(120), run: panel_a },
    Criterion { id: 5, title: "panel B monotone in enrollment bias", budget: Duration::from_secs(600), run: panel_b },
    Criterion { id: 6, title: "calibration correctness and panel C", budget: Duration::from_secs(120), run: calibration },
    Criterion { id: 7, title: "panel D degrades with moment noise", budget: Duration::from_secs(300), run: panel_d },
    Criterion { id: 8, title: "numerics", budget: Duration::from_secs(30), run: numerics },
    Criterion { id: 9, title: "determinism", budget: Duration::from_secs(600), run: determinism },
];

fn main() -> ExitCode {
    let selected: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let chosen: Vec<&Criterion> = CRITERIA
        .iter()
        .filter(|c| selected.is_empty() || selected.contains(&c.id))
        .collect();
    let mut failures = 0;
    for c in &chosen {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let on_time = elapsed <= c.budget;
        let ok = outcome.passed && on_time;
        failures += usize::from(!ok);
        println!(
            "{} criterion {}: {} ({}) [{:.1} s, budget {} s{}]",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.title,
            outcome.detail,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            if on_time { "" } else { ", over budget" }
        );
    }
    if failures == 0 {
        println!("acceptance: all {} criteria passed", chosen.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} of {} criteria failed", chosen.len());
        ExitCode::FAILURE
    }
}

fn oracle_unbiased() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=10);
        let dim = rng.random_range(1..=3);
        let deltas: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..=1.0)).collect();
        let est = Estimator::Ipw { probs: p.clone(), divisor: n as f64 };
        let Ok(e) = enumerate_ipw_expectation(&deltas, &p, &est) else {
            return Outcome::new(false, "enumeration failed");
        };
        for k in 0..dim {
            let mean = deltas.iter().map(|d| d[k]).sum::<f64>() / n as f64;
            worst = worst.max((e[k] - mean).abs());
        }
    }
    Outcome::new(worst <= 1e-12, format!("max error {worst:.2e} over 50 instances"))
}

/// Root of an increasing function by bisection.
fn bisect_root(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn lower_bound() -> Outcome {
    let (mut min_err, mut gap_err, mut margin) = (0.0_f64, 0.0_f64, f64::INFINITY);
    let mut count = 0;
    for mu in [0.5, 1.0, 2.0] {
        for a in [0.5, 1.0, 2.0] {
            for eps in [0.1, 0.3, 0.5] {
                let inst = TwoClientInstance::new(mu, a, eps).unwrap();
                let target = |t: f64| 0.25 * mu * ((t - a).powi(2) + (t + a).powi(2));
                let weighted_slope = |t: f64| mu * ((1.0 + eps) * (t - a) + (1.0 - eps) * (t + a));
                let target_slope = |t: f64| 0.5 * mu * ((t - a) + (t + a));
                let theta_rho = bisect_root(weighted_slope, -4.0 * a, 4.0 * a);
                let theta_star = bisect_root(target_slope, -4.0 * a, 4.0 * a);
                let gap = two_client_gap(&inst);
                min_err = min_err.max((two_client_minimizer(&inst) - theta_rho).abs());
                gap_err = gap_err.max((gap - (target(theta_rho) - target(theta_star))).abs());
                let g2 = (mu * a).powi(2);
                margin = margin.min(gap - eps * eps * g2 / (8.0 * mu));
                count += 1;
            }
        }
    }
    Outcome::new(
        count == 27 && min_err <= 1e-10 && gap_err <= 1e-10 && margin >= 0.0,
        format!("{count} points, minimizer err {min_err:.1e}, gap err {gap_err:.1e}, min margin over eighth {margin:.3e}"),
    )
}

fn bias_floor() -> Outcome {
    let mut worst_floor = 0.0_f64;
    let mut worst_full = 0.0_f64;
    for (mu, a, eps) in [(1.0, 1.0, 0.4), (2.0, 0.5, 0.2), (0.5, 2.0, 0.1)] {
        let inst = TwoClientInstance::new(mu, a, eps).unwrap();
        let enroll = inst.enrollment_probs();
        let part = [0.5, 0.8];
        let p_true = [enroll[0] * part[0], enroll[1] * part[1]];
        let training = TrainingConfig {
            local_steps: 5,
            local_step_size: 0.1,
            server_step_size: 1.0,
            rounds: 400,
            batch_size: BatchSize::Full,
            seed: 3,
        };
        let clients = inst.clients();
        let run = |p_used: &[f64]| {
            expected_ipw_dynamics(&clients, &p_true, p_used, 2.0, &training, vec![1.0])
                .map_or(f64::NAN, |s| s.theta[0])
        };
        let round_only = run(&part);
        let floor_err = (round_only - eps * a).abs();
        let full_err = run(&p_true).abs();
        worst_floor = worst_floor.max(if floor_err.is_nan() { f64::INFINITY } else { floor_err });
        worst_full = worst_full.max(if full_err.is_nan() { f64::INFINITY } else { full_err });
    }
    Outcome::new(
        worst_floor <= 1e-3 && worst_full <= 1e-3,
        format!("round-only |θ − ε·a| ≤ {worst_floor:.1e}, two-stage |θ − θ*| ≤ {worst_full:.1e}"),
    )
}

fn report(panel: Panel) -> Result<ExperimentReport, Outcome> {
    Experiment::new(ExperimentConfig::default())
        .and_then(|e| e.run_panel(panel))
        .map_err(|e| Outcome::new(false, format!("run failed: {e:#}")))
}

fn panel_a() -> Outcome {
    let r = match report(Panel::A) {
        Ok(r) => r,
        Err(o) => return o,
    };
    let loss = Metric::TargetLoss;
    let d1 = r.paired_gap(Method::Naive, Method::RoundOnlyIpw, None, loss);
    let d2 = r.paired_gap(Method::RoundOnlyIpw, Method::FedIpw, None, loss);
    let d3 = r.paired_gap(Method::FedIpw, Method::OracleIpw, None, loss);
    let passed = d1.mean > 3.0 * d1.sd && d2.mean > 3.0 * d2.sd && d3.mean.abs() < d3.sd;
    Outcome::new(
        passed,
        format!(
            "naive−round_only {:.2e} (sd {:.1e}), round_only−fedipw {:.2e} (sd {:.1e}), fedipw−oracle {:.2e} (sd {:.1e}), {} replications",
            d1.mean, d1.sd, d2.mean, d2.sd, d3.mean, d3.sd, d1.n
        ),
    )
}

fn panel_b() -> Outcome {
    let r = match report(Panel::B) {
        Ok(r) => r,
        Err(o) => return o,
    };
    let loss = Metric::TargetLoss;
    let points = r.sweep_values();
    let gaps: Vec<_> = points
        .iter()
        .map(|&s| r.paired_gap(Method::RoundOnlyIpw, Method::FedIpw, s, loss))
        .collect();
    let monotone = gaps.windows(2).all(|w| w[1].mean >= w[0].mean - w[0].sd.max(w[1].sd));

    let methods = [Method::Naive, Method::RoundOnlyIpw, Method::FedIpw, Method::OracleIpw];
    let zero = points.iter().copied().find(|s| *s == Some(0.0)).flatten();
    let mut worst_ratio = f64::INFINITY;
    if zero.is_some() {
        worst_ratio = 0.0;
        for (i, &a) in methods.iter().enumerate() {
            for &b in &methods[i + 1..] {
                let d = r.paired_gap(a, b, zero, loss);
                worst_ratio = worst_ratio.max(d.mean.abs() / d.sd);
            }
        }
    }
    let trend = gaps.iter().map(|g| format!("{:.2e}", g.mean)).collect::<Vec<_>>().join(", ");
    Outcome::new(
        monotone && worst_ratio < 3.0,
        format!("round_only−fedipw by bias scale [{trend}], at zero bias max |gap|/sd {worst_ratio:.2}"),
    )
}

fn check_weights(b: &RowMatrix, target: &[f64]) -> Result<(f64, f64, f64, Vec<f64>), String> {
    let w = solve_calibration_weights(b, target).map_err(|e| e.to_string())?;
    let sum_err = (w.weights.iter().sum::<f64>() - 1.0).abs();
    let mut moment_err = 0.0_f64;
    for (k, t) in target.iter().enumerate() {
        let m: f64 = (0..b.rows()).map(|i| b.row(i)[k] * w.weights[i]).sum();
        moment_err = moment_err.max((m - t).abs());
    }
    let min_q = w.weights.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((sum_err, moment_err, min_q, w.weights))
}

fn calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut sum_err, mut moment_err, mut min_q) = (0.0_f64, 0.0_f64, f64::INFINITY);
    let (mut small, mut worst_grid) = (0, f64::NEG_INFINITY);
    for inst in 0..100 {
        let q = 1 + inst % 3;
        let n = if inst % 4 == 0 {
            rng.random_range(q + 1..=4)
        } else {
            rng.random_range(q + 2..=50)
        };
        let (b, target) = grid_qp::random_instance(&mut rng, n, q);
        let (s, m, lo, weights) = match check_weights(&b, &target) {
            Ok(v) => v,
            Err(e) => return Outcome::new(false, format!("instance {inst} failed: {e}")),
        };
        sum_err = sum_err.max(s);
        moment_err = moment_err.max(m);
        min_q = min_q.min(lo);
        if n <= 4 {
            small += 1;
            let step = if n - (q + 1) >= 2 { 2e-3 } else { 1e-4 };
            if let Some((best, _)) = grid_qp::grid_qp(&b, &target, step) {
                worst_grid = worst_grid.max(grid_qp::objective(&weights) - best);
            }
        }
    }
    let instances_ok = sum_err <= 1e-10 && moment_err <= 1e-8 && min_q >= 0.0 && worst_grid <= 1e-6;

    let r = match report(Panel::C) {
        Ok(r) => r,
        Err(o) => return o,
    };
    let mean = |m| r.summary(m, None, Metric::TargetLoss).mean;
    let (ro, cal, fed) = (mean(Method::RoundOnlyIpw), mean(Method::Calibrated), mean(Method::FedIpw));
    let closure = (ro - cal) / (ro - fed);
    Outcome::new(
        instances_ok && closure >= 0.5,
        format!(
            "sum err {sum_err:.1e}, moment err {moment_err:.1e}, min q {min_q:.1e}, {small} grid-checked with best improvement {:.1e}, panel C closes {:.0}% of the gap",
            -worst_grid,
            100.0 * closure
        ),
    )
}

fn panel_d() -> Outcome {
    let experiment = match Experiment::new(ExperimentConfig::default()) {
        Ok(e) => e,
        Err(e) => return Outcome::new(false, format!("setup failed: {e:#}")),
    };
    let (d, c) = match (experiment.run_panel(Panel::D), experiment.run_panel(Panel::C)) {
        (Ok(d), Ok(c)) => (d, c),
        (Err(e), _) | (_, Err(e)) => return Outcome::new(false, format!("run failed: {e:#}")),
    };
    let sigmas = d.sweep_values();
    let dist: Vec<_> = sigmas
        .iter()
        .map(|&s| d.summary(Method::Calibrated, s, Metric::DistToOpt))
        .collect();
    let monotone = dist.windows(2).all(|w| w[1].mean >= w[0].mean - w[0].sd.max(w[1].sd));

    let key = |row: &fedsel::panels::MetricsRow| {
        (
            row.replication,
            row.round,
            row.target_loss.to_bits(),
            row.dist_to_opt.to_bits(),
            row.participants,
            row.mean_weight.to_bits(),
            row.max_rho_err.to_bits(),
        )
    };
    let calibrated = Method::Calibrated.name();
    let from_d: Vec<_> = d
        .rows
        .iter()
        .filter(|row| row.sweep_value == Some(0.0))
        .map(key)
        .collect();
    let from_c: Vec<_> = c.rows.iter().filter(|row| row.method == calibrated).map(key).collect();
    let reproduces = !from_c.is_empty() && from_c == from_d;
    let trend = dist.iter().map(|s| format!("{:.4}", s.mean)).collect::<Vec<_>>().join(", ");
    Outcome::new(
        monotone && reproduces,
        format!(
            "mean ‖θ − θ*‖ by noise [{trend}], zero-noise rows {} panel C",
            if reproduces { "identical to" } else { "differ from" }
        ),
    )
}

fn numerics() -> Outcome {
    let config = ExperimentConfig::default();
    let experiment = match Experiment::new(config.clone()) {
        Ok(e) => e,
        Err(e) => return Outcome::new(false, format!("setup failed: {e:#}")),
    };
    let ridge = config.population.ridge;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = config.population.feature_dim;
    let mut worst_rel = 0.0_f64;
    let h = 1e-5;
    for _ in 0..20 {
        let theta: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        for c in experiment.population.iter().take(10) {
            let g = client_gradient(c, &theta, ridge).unwrap();
            let fd: Vec<f64> = (0..m)
                .map(|k| {
                    let mut up = theta.clone();
                    let mut dn = theta.clone();
                    up[k] += h;
                    dn[k] -= h;
                    (client_loss(c, &up, ridge).unwrap() - client_loss(c, &dn, ridge).unwrap()) / (2.0 * h)
                })
                .collect();
            let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
            worst_rel = worst_rel.max(norm2(&diff) / norm2(&fd).max(1e-8));
        }
    }
    let grad = population_gradient(&experiment.population, &experiment.oracle.theta_star, ridge)
        .map_or(f64::INFINITY, |g| norm2(&g));

    let n = 100_000;
    let mut rng = StreamKey::new(8, Purpose::Features).rng();
    let truth = (0.3, [-1.0, 0.6, 0.2]);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let s = truth.0 + truth.1.iter().zip(&x).map(|(b, v)| b * v).sum::<f64>();
        labels.push(rng.random_bool(logistic(s)));
        rows.push(x);
    }
    let irls_err = RowMatrix::from_rows(&rows)
        .ok()
        .and_then(|x| fit_logistic(&x, &labels, 1e-6, 1e-10, 50).ok())
        .map_or(f64::INFINITY, |fit| {
            fit.coefficients
                .iter()
                .zip(truth.1)
                .map(|(c, t)| (c - t).abs())
                .fold((fit.intercept - truth.0).abs(), f64::max)
        });
    Outcome::new(
        worst_rel < 1e-6 && grad < 1e-10 && irls_err <= 0.05,
        format!("gradient rel err {worst_rel:.1e}, optimum grad norm {grad:.1e}, IRLS max coef err {irls_err:.3}"),
    )
}

const REDUCED: &str = "\
replications = 3

[population]
num_clients = 80
samples_per_client = 40

[training]
rounds = 20
batch_size = 16

[propensity]
window = 10

[panels]
bias_scales = [0.0, 1.0]
noise_sigmas = [0.0, 0.5]
";

fn cli_run(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fedsel"))
        .args(args)
        .env_remove("FEDSEL_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).into_iter().flatten().flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&path).unwrap_or_default()));
            }
        }
    }
    files.sort();
    files
}

fn determinism() -> Outcome {
    let Ok(tmp) = tempfile::tempdir() else {
        return Outcome::new(false, "no temporary directory");
    };
    let config = tmp.path().join("reduced.toml");
    if fs::write(&config, REDUCED).is_err() {
        return Outcome::new(false, "could not write config");
    }
    let config = config.to_str().unwrap();
    for run in ["first", "second"] {
        let out = tmp.path().join(run);
        let out = out.to_str().unwrap();
        for panel in ["a", "b", "c", "d"] {
            if let Err(e) = cli_run(&["run", "--panel", panel, "--config", config, "--out", out]) {
                return Outcome::new(false, format!("panel {panel} failed: {e}"));
            }
        }
        let sweep = ["sweep", "--param", "training.local_step_size", "--values", "0.02,0.05"];
        if let Err(e) = cli_run(&[&sweep[..], &["--config", config, "--out", out]].concat()) {
            return Outcome::new(false, format!("sweep failed: {e}"));
        }
    }
    let first = csv_files(&tmp.path().join("first"));
    let second = csv_files(&tmp.path().join("second"));
    let identical = !first.is_empty() && first == second;
    Outcome::new(
        identical,
        format!(
            "{} CSVs from four panels and a sweep at reduced scale, re-runs {}",
            first.len(),
            if identical { "byte-identical" } else { "differ" }
        ),
    )
}
