use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::plot::{render_plot, PlotSeries};
use super::{SweepAxis, SweepReport};
use crate::crb::ScalingMode;
use crate::error::Result;
use crate::estimators::Method;

/// One row of the long-form results table: a (sweep point, method) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub axis: String,
    pub value: f64,
    pub method: String,
    pub n_trials: usize,
    pub n_test: usize,
    pub excluded: usize,
    pub mse_theta: f64,
    pub mse_vel: f64,
    pub mse_theta_db: f64,
    pub mse_vel_db: f64,
    pub bias2_theta: f64,
    pub var_theta: f64,
    pub bias2_vel: f64,
    pub var_vel: f64,
    pub crb_theta_verbatim: f64,
    pub crb_theta_scaled: f64,
    pub crb_vel_verbatim: f64,
    pub crb_vel_scaled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CrbRow {
    sweep_axis: String,
    sweep_value: f64,
    crb_theta_deg2: f64,
    crb_vel_mps2: f64,
    scaling_mode: String,
    excluded_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TimingRow {
    axis: String,
    value: f64,
    trials_s: f64,
    training_s: f64,
    total_s: f64,
    epochs: usize,
    best_epoch: usize,
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedFiles {
    pub results: PathBuf,
    pub crb: PathBuf,
    pub timing: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn db(x: f64) -> f64 {
    10.0 * x.log10()
}

impl SweepReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        for p in &self.points {
            for m in &p.methods {
                rows.push(ReportRow {
                    axis: self.axis.tag().to_string(),
                    value: p.value,
                    method: m.method.tag().to_string(),
                    n_trials: p.trials,
                    n_test: p.test_trials,
                    excluded: p.excluded,
                    mse_theta: m.theta.mse,
                    mse_vel: m.velocity.mse,
                    mse_theta_db: db(m.theta.mse),
                    mse_vel_db: db(m.velocity.mse),
                    bias2_theta: m.theta.bias2,
                    var_theta: m.theta.var,
                    bias2_vel: m.velocity.bias2,
                    var_vel: m.velocity.var,
                    crb_theta_verbatim: p.crb_verbatim.crb_theta,
                    crb_theta_scaled: p.crb_scaled.crb_theta,
                    crb_vel_verbatim: p.crb_verbatim.crb_velocity,
                    crb_vel_scaled: p.crb_scaled.crb_velocity,
                });
            }
        }
        rows
    }
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

const RESULT_HEADER: [&str; 18] = [
    "axis",
    "value",
    "method",
    "n_trials",
    "n_test",
    "excluded",
    "mse_theta",
    "mse_vel",
    "mse_theta_db",
    "mse_vel_db",
    "bias2_theta",
    "var_theta",
    "bias2_vel",
    "var_vel",
    "crb_theta_verbatim",
    "crb_theta_scaled",
    "crb_vel_verbatim",
    "crb_vel_scaled",
];

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
    Ok(rows)
}

fn file_stem(axis: SweepAxis) -> String {
    format!("sweep_{}", axis.tag())
}

/// Writes `sweep_<axis>.csv`, `crb_<axis>.csv`, `timing_<axis>.csv` and one SVG
/// per parameter into `out_dir`. The results and bound tables depend only on
/// the spec and seed; wall-clock numbers go to the timing table alone.
pub fn emit_report(report: &SweepReport, out_dir: &Path, plot_scaling: ScalingMode) -> Result<EmittedFiles> {
    std::fs::create_dir_all(out_dir)?;
    let stem = file_stem(report.axis);
    let axis = report.axis.tag().to_string();
    let results = out_dir.join(format!("{stem}.csv"));
    write_rows(&results, &RESULT_HEADER, &report.rows())?;

    let crb_rows: Vec<CrbRow> = report
        .points
        .iter()
        .flat_map(|p| {
            [ScalingMode::Verbatim, ScalingMode::SnapshotScaled].map(|mode| {
                let c = p.crb(mode);
                CrbRow {
                    sweep_axis: axis.clone(),
                    sweep_value: p.value,
                    crb_theta_deg2: c.crb_theta,
                    crb_vel_mps2: c.crb_velocity,
                    scaling_mode: mode.tag().to_string(),
                    excluded_trials: c.excluded,
                }
            })
        })
        .collect();
    let crb = out_dir.join(format!("crb_{}.csv", report.axis.tag()));
    write_rows(
        &crb,
        &["sweep_axis", "sweep_value", "crb_theta_deg2", "crb_vel_mps2", "scaling_mode", "excluded_trials"],
        &crb_rows,
    )?;

    let timing_rows: Vec<TimingRow> = report
        .points
        .iter()
        .map(|p| TimingRow {
            axis: axis.clone(),
            value: p.value,
            trials_s: p.timing.trials_s,
            training_s: p.timing.training_s,
            total_s: p.timing.total_s,
            epochs: p.training.epochs.len(),
            best_epoch: p.training.best_epoch,
        })
        .collect();
    let timing = out_dir.join(format!("timing_{}.csv", report.axis.tag()));
    write_rows(
        &timing,
        &["axis", "value", "trials_s", "training_s", "total_s", "epochs", "best_epoch"],
        &timing_rows,
    )?;

    let mut plots = Vec::new();
    if report.points.is_empty() {
        log::warn!("sweep over {} has no points; writing header-only tables and no plots", axis);
    } else {
        for (param, label) in [("theta", "azimuth MSE (deg²)"), ("vel", "velocity MSE ((m/s)²)")] {
            let mut series: Vec<PlotSeries> = Method::ALL
                .iter()
                .map(|&m| PlotSeries {
                    name: m.tag().to_string(),
                    points: report
                        .points
                        .iter()
                        .filter_map(|p| {
                            let mm = p.method(m)?;
                            let e = if param == "theta" { mm.theta.mse } else { mm.velocity.mse };
                            Some((p.value, e))
                        })
                        .collect(),
                })
                .collect();
            series.push(PlotSeries {
                name: "CRB".to_string(),
                points: report
                    .points
                    .iter()
                    .map(|p| {
                        let c = p.crb(plot_scaling);
                        (p.value, if param == "theta" { c.crb_theta } else { c.crb_velocity })
                    })
                    .collect(),
            });
            let svg = render_plot(
                &format!("{label} vs {}", report.axis.label()),
                report.axis.label(),
                label,
                &series,
            );
            let path = out_dir.join(format!("{stem}_{param}.svg"));
            std::fs::write(&path, svg)?;
            plots.push(path);
        }
    }
    Ok(EmittedFiles { results, crb, timing, plots })
}
