//! CSV persistence. Every file is UTF-8, comma separated, with a header
//! row; floats use the shortest decimal that round-trips.

use std::fs;
use std::io::Write;
use std::path::Path;

use fedsel_core::federation::{Method, PreparedSelection};
use fedsel_core::linalg::logit;
use fedsel_core::propensity::PropensityModel;

use crate::panels::{ExperimentReport, Metric};

pub fn float(x: f64) -> String {
    ryu::Buffer::new().format(x).to_owned()
}

fn opt_float(x: Option<f64>) -> String {
    x.map(float).unwrap_or_default()
}

pub fn write_metrics<W: Write>(out: W, report: &ExperimentReport) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in &report.rows {
        w.serialize(row)?;
    }
    if report.rows.is_empty() {
        w.write_record(METRICS_HEADER)?;
    }
    w.flush()?;
    Ok(())
}

const METRICS_HEADER: [&str; 11] = [
    "experiment",
    "replication",
    "sweep_param",
    "sweep_value",
    "round",
    "method",
    "target_loss",
    "dist_to_opt",
    "participants",
    "mean_weight",
    "max_rho_err",
];

/// Mean and standard deviation of final-round metrics per sweep point and
/// method.
pub fn write_summary<W: Write>(out: W, report: &ExperimentReport) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "experiment",
        "sweep_param",
        "sweep_value",
        "method",
        "replications",
        "final_target_loss_mean",
        "final_target_loss_sd",
        "final_dist_to_opt_mean",
        "final_dist_to_opt_sd",
    ])?;
    for sv in report.sweep_values() {
        for m in Method::ALL {
            let loss = report.summary(m, sv, Metric::TargetLoss);
            if loss.n == 0 {
                continue;
            }
            let dist = report.summary(m, sv, Metric::DistToOpt);
            w.write_record([
                report.experiment.clone(),
                report.sweep_param.clone(),
                opt_float(sv),
                m.name().to_owned(),
                loss.n.to_string(),
                float(loss.mean),
                float(loss.sd),
                float(dist.mean),
                float(dist.sd),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_selection_trace<W: Write>(out: W, prepared: &PreparedSelection) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["client_id", "round", "E", "A", "pi_enroll", "pi_part", "p_true"])?;
    let enrollment = &prepared.trace.enrollment;
    for draw in &prepared.trace.rounds {
        for i in 0..enrollment.enrolled.len() {
            w.write_record([
                i.to_string(),
                draw.round.to_string(),
                u8::from(enrollment.enrolled[i]).to_string(),
                u8::from(draw.participated[i]).to_string(),
                float(enrollment.prob[i]),
                float(draw.part_prob[i]),
                float(draw.inclusion[i]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn fit_record(tag: &str, round: Option<usize>, model: &PropensityModel) -> Vec<String> {
    let mut rec = vec![tag.to_owned(), round.map(|r| r.to_string()).unwrap_or_default()];
    match model {
        PropensityModel::Logistic(fit) => {
            rec.push(float(fit.intercept));
            rec.extend(fit.coefficients.iter().map(|&c| float(c)));
            rec.push(fit.converged.to_string());
            rec.push(fit.iterations.to_string());
        }
        PropensityModel::Constant { prob, .. } => {
            rec.push(float(logit(*prob)));
            rec.push("false".into());
            rec.push("0".into());
        }
    }
    rec
}

/// One row for the enrollment model and one per round for participation.
/// Constant fallbacks are tagged `*_constant` and leave the slopes empty.
pub fn write_fits<W: Write>(out: W, prepared: &PreparedSelection) -> csv::Result<()> {
    let schedule = &prepared.schedule;
    let width = schedule
        .part_models
        .iter()
        .chain([&schedule.enroll_model])
        .filter_map(|m| m.as_fit().map(|f| f.coefficients.len()))
        .max()
        .unwrap_or(0);
    let mut header = vec!["model".to_owned(), "round".into(), "intercept".into()];
    header.extend((0..width).map(|k| format!("coef_{k}")));
    header.push("converged".into());
    header.push("iterations".into());
    let pad = |mut rec: Vec<String>| {
        let tail = rec.split_off(rec.len() - 2);
        rec.resize(header.len() - 2, String::new());
        rec.extend(tail);
        rec
    };
    let tag = |m: &PropensityModel, base: &str| match m {
        PropensityModel::Logistic(_) => base.to_owned(),
        PropensityModel::Constant { .. } => format!("{base}_constant"),
    };

    let mut w = csv::Writer::from_writer(out);
    w.write_record(&header)?;
    let enroll = &schedule.enroll_model;
    w.write_record(pad(fit_record(&tag(enroll, "enrollment"), None, enroll)))?;
    for (draw, model) in prepared.trace.rounds.iter().zip(&schedule.part_models) {
        w.write_record(pad(fit_record(&tag(model, "participation"), Some(draw.round), model)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_calibration_weights<W: Write>(out: W, report: &ExperimentReport) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["experiment", "replication", "sweep_value", "client_id", "q", "pinned_flag"])?;
    for rec in &report.calibrations {
        for &(id, q, pinned) in &rec.weights {
            w.write_record([
                rec.experiment.clone(),
                rec.replication.to_string(),
                opt_float(rec.sweep_value),
                id.to_string(),
                float(q),
                u8::from(pinned).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_calibration_diagnostics<W: Write>(out: W, report: &ExperimentReport) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "experiment",
        "replication",
        "sweep_value",
        "constraint_residual",
        "slack_norm",
        "active_set_size",
    ])?;
    for rec in &report.calibrations {
        w.write_record([
            rec.experiment.clone(),
            rec.replication.to_string(),
            opt_float(rec.sweep_value),
            float(rec.outcome.constraint_residual),
            float(rec.outcome.slack_norm),
            rec.outcome.active_set_size.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Names of the files `write_report` produces, relative to its directory.
pub fn report_files(report: &ExperimentReport) -> Vec<&'static str> {
    let mut files = vec!["metrics.csv", "summary.csv"];
    if report.first_selection.is_some() {
        files.extend(["selection_trace.csv", "propensity_fits.csv"]);
    }
    if !report.calibrations.is_empty() {
        files.extend(["calibration_weights.csv", "calibration_diagnostics.csv"]);
    }
    files
}

/// Writes every CSV for `report` into `dir` (created if missing).
pub fn write_report(dir: &Path, report: &ExperimentReport) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let open = |name: &str| -> anyhow::Result<std::io::BufWriter<fs::File>> {
        Ok(std::io::BufWriter::new(fs::File::create(dir.join(name))?))
    };
    write_metrics(open("metrics.csv")?, report)?;
    write_summary(open("summary.csv")?, report)?;
    if let Some(prepared) = &report.first_selection {
        write_selection_trace(open("selection_trace.csv")?, prepared)?;
        write_fits(open("propensity_fits.csv")?, prepared)?;
    }
    if !report.calibrations.is_empty() {
        write_calibration_weights(open("calibration_weights.csv")?, report)?;
        write_calibration_diagnostics(open("calibration_diagnostics.csv")?, report)?;
    }
    Ok(())
}
