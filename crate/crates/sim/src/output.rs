//! Run artifacts on disk.
//!
//! A run directory holds three files:
//!
//! * `timeseries.csv`: one row per control step. The first line is a `#`
//!   comment listing every column with its unit, followed by the header row.
//!   Floats are written in shortest round-trip form, so reading the file back
//!   reproduces the recorded values bit for bit.
//! * `metrics.json`: the run summary, versioned by `schema` and
//!   `schema_version` and described by [`METRICS_SCHEMA`].
//! * `scenario.toml`: the resolved scenario with every default filled in.
//!
//! QP dumps requested on the command line are written next to them as
//! `qp_step_<k>.txt`.

use crate::runner::RunArtifacts;
use crate::scenario::Scenario;
use crate::SimError;
use drift_core::analysis::{MetricSample, RunMetrics};
use drift_core::qp::QpStatus;
use drift_core::sim::TimeSeriesRecord;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const TIMESERIES_FILE: &str = "timeseries.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const SCENARIO_FILE: &str = "scenario.toml";

pub const METRICS_SCHEMA_ID: &str = "drift-sim.metrics";
pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// JSON Schema (draft 2020-12) for `metrics.json`.
pub const METRICS_SCHEMA: &str = include_str!("../schema/metrics.schema.json");

/// Column names and units, in file order.
pub const COLUMNS: [(&str, &str); 34] = [
    ("step", "-"),
    ("time", "s"),
    ("beta", "rad"),
    ("omega", "rad/s"),
    ("v", "m/s"),
    ("phi", "rad"),
    ("x", "m"),
    ("y", "m"),
    ("s_ref", "m"),
    ("e_d", "m"),
    ("e_phi", "rad"),
    ("e_v", "m/s"),
    ("e_omega", "rad/s"),
    ("omega_des", "rad/s"),
    ("fx_front_cmd", "N"),
    ("fx_rear_cmd", "N"),
    ("fy_front_cmd", "N"),
    ("fy_rear_cmd", "N"),
    ("delta_front", "rad"),
    ("delta_rear", "rad"),
    ("torque_front", "N m"),
    ("torque_rear", "N m"),
    ("tire_fx_front", "N"),
    ("tire_fy_front", "N"),
    ("tire_fx_rear", "N"),
    ("tire_fy_rear", "N"),
    ("util_front", "-"),
    ("util_rear", "-"),
    ("qp_status", "optimal|max-iterations|infeasible"),
    ("qp_iterations", "-"),
    ("fallback", "0|1"),
    ("disturbance_norm", "N"),
    ("newton_converged", "0|1 front, 0|1 rear"),
    ("steer_saturated", "0|1 front, 0|1 rear"),
];

fn column_index(name: &str) -> usize {
    COLUMNS.iter().position(|(c, _)| *c == name).expect("known column")
}

fn header_comment() -> String {
    let cols: Vec<String> = COLUMNS.iter().map(|(c, u)| format!("{c} [{u}]")).collect();
    format!(
        "# drift-sim time series; tire forces are in the tire frame; newton_converged and steer_saturated pack front and rear as two digits; columns: {}\n",
        cols.join(", ")
    )
}

fn num(x: f64) -> String {
    format!("{x:?}")
}

pub fn status_name(status: QpStatus) -> &'static str {
    match status {
        QpStatus::Optimal => "optimal",
        QpStatus::MaxIterations => "max-iterations",
        QpStatus::Infeasible => "infeasible",
    }
}

fn record_row(r: &TimeSeriesRecord) -> Vec<String> {
    let s = &r.state;
    let e = &r.errors;
    let u = &r.command;
    let a = &r.actuator;
    let t = &r.tire_forces;
    let d = &r.actuator_diagnostics;
    let flag = |b: bool| if b { "1" } else { "0" }.to_string();
    vec![
        r.step.to_string(),
        num(r.time),
        num(s.beta),
        num(s.omega),
        num(s.v),
        num(s.phi),
        num(s.x),
        num(s.y),
        num(r.s_ref),
        num(e.lateral),
        num(e.heading),
        num(e.speed),
        num(e.yaw_rate),
        num(r.omega_des),
        num(u.fx_front),
        num(u.fx_rear),
        num(u.fy_front),
        num(u.fy_rear),
        num(a.delta_front),
        num(a.delta_rear),
        num(a.torque_front),
        num(a.torque_rear),
        num(t.front.longitudinal),
        num(t.front.lateral),
        num(t.rear.longitudinal),
        num(t.rear.lateral),
        num(r.front_utilization()),
        num(r.rear_utilization()),
        status_name(r.qp_status).to_string(),
        r.qp_iterations.to_string(),
        flag(r.fallback),
        num(r.disturbance_norm),
        format!("{}{}", flag(d.front.converged), flag(d.rear.converged)),
        format!("{}{}", flag(d.front.saturated), flag(d.rear.saturated)),
    ]
}

/// Serializes the time series to the documented CSV layout.
pub fn timeseries_csv(records: &[TimeSeriesRecord]) -> String {
    let mut out = header_comment();
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(COLUMNS.iter().map(|(c, _)| *c))
        .expect("in-memory write");
    for r in records {
        writer.write_record(record_row(r)).expect("in-memory write");
    }
    let body = writer.into_inner().expect("in-memory write");
    out.push_str(std::str::from_utf8(&body).expect("ascii output"));
    out
}

/// Reads the metric inputs back from a time-series CSV.
pub fn read_samples(path: &Path) -> Result<Vec<MetricSample>, SimError> {
    let csv_err = |source| SimError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let text = fs::read_to_string(path).map_err(SimError::io(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(csv_err)?.clone();
    let expected: Vec<&str> = COLUMNS.iter().map(|(c, _)| *c).collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(SimError::RunDir(format!("{}: unexpected header row", path.display())));
    }
    let bad =
        |line: usize, col: &str| SimError::RunDir(format!("{}: row {line}: bad value in column {col}", path.display()));
    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let field = |name: &str| record.get(column_index(name)).unwrap_or("");
        let float = |name: &str| field(name).parse::<f64>().map_err(|_| bad(row + 1, name));
        let flag = |text: &str, name: &str| match text {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(row + 1, name)),
        };
        let pair = |name: &str| {
            let text = field(name);
            if text.len() != 2 || !text.is_ascii() {
                return Err(bad(row + 1, name));
            }
            Ok((flag(&text[..1], name)?, flag(&text[1..], name)?))
        };
        let (front_ok, rear_ok) = pair("newton_converged")?;
        let (front_sat, rear_sat) = pair("steer_saturated")?;
        samples.push(MetricSample {
            time: float("time")?,
            beta: float("beta")?,
            omega: float("omega")?,
            lateral_error: float("e_d")?,
            front_utilization: float("util_front")?,
            rear_utilization: float("util_rear")?,
            fallback: flag(field("fallback"), "fallback")?,
            steering_converged: front_ok && rear_ok,
            steering_saturated: front_sat || rear_sat,
        });
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbortInfo {
    pub step: usize,
    pub time: f64,
    pub reason: String,
}

/// [`RunMetrics`] as stored in the JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsBody {
    pub steps: usize,
    pub max_abs_lateral_error: Option<f64>,
    pub rms_lateral_error: Option<f64>,
    pub steady_lateral_error: Option<f64>,
    pub steady_abs_lateral_error: Option<f64>,
    pub drift_onset_time: Option<f64>,
    pub sustained_drift: bool,
    pub settled: bool,
    pub steady_sideslip_deg: Option<f64>,
    pub min_abs_steady_sideslip_deg: Option<f64>,
    pub steady_yaw_rate: Option<f64>,
    pub max_front_utilization: Option<f64>,
    pub max_rear_utilization: Option<f64>,
    pub steady_rear_utilization_share: Option<f64>,
    pub qp_fallbacks: usize,
    pub steering_nonconverged: usize,
    pub steering_saturated: usize,
}

impl From<&RunMetrics> for MetricsBody {
    fn from(m: &RunMetrics) -> Self {
        Self {
            steps: m.steps,
            max_abs_lateral_error: m.max_abs_lateral_error,
            rms_lateral_error: m.rms_lateral_error,
            steady_lateral_error: m.steady_lateral_error,
            steady_abs_lateral_error: m.steady_abs_lateral_error,
            drift_onset_time: m.drift_onset_time,
            sustained_drift: m.sustained_drift,
            settled: m.settled,
            steady_sideslip_deg: m.steady_sideslip_deg,
            min_abs_steady_sideslip_deg: m.min_abs_steady_sideslip_deg,
            steady_yaw_rate: m.steady_yaw_rate,
            max_front_utilization: m.max_front_utilization,
            max_rear_utilization: m.max_rear_utilization,
            steady_rear_utilization_share: m.steady_rear_utilization_share,
            qp_fallbacks: m.qp_fallbacks,
            steering_nonconverged: m.steering_nonconverged,
            steering_saturated: m.steering_saturated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsDocument {
    pub schema: String,
    pub schema_version: u32,
    pub scenario: String,
    pub sample_time: f64,
    pub aborted: Option<AbortInfo>,
    pub metrics: MetricsBody,
}

impl MetricsDocument {
    pub fn new(scenario: &Scenario, metrics: &RunMetrics, aborted: Option<AbortInfo>) -> Self {
        Self {
            schema: METRICS_SCHEMA_ID.to_string(),
            schema_version: METRICS_SCHEMA_VERSION,
            scenario: scenario.name.clone(),
            sample_time: scenario.controller.sample_time,
            aborted,
            metrics: metrics.into(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("metrics serialize");
        text.push('\n');
        text
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(SimError::io(path))?;
        let doc: Self = serde_json::from_str(&text).map_err(|source| SimError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if doc.schema != METRICS_SCHEMA_ID || doc.schema_version != METRICS_SCHEMA_VERSION {
            return Err(SimError::RunDir(format!(
                "{}: unsupported schema {} v{}",
                path.display(),
                doc.schema,
                doc.schema_version
            )));
        }
        Ok(doc)
    }
}

pub fn metrics_document(artifacts: &RunArtifacts) -> MetricsDocument {
    let aborted = artifacts.outcome.aborted.as_ref().map(|a| AbortInfo {
        step: a.step,
        time: a.time,
        reason: a.error.to_string(),
    });
    MetricsDocument::new(&artifacts.scenario, &artifacts.metrics, aborted)
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf, SimError> {
    fs::write(&path, contents).map_err(SimError::io(&path))?;
    Ok(path)
}

/// Writes the run directory, creating it if needed, and returns the paths
/// written.
pub fn emit(artifacts: &RunArtifacts, dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    fs::create_dir_all(dir).map_err(SimError::io(dir))?;
    let mut written = vec![
        write(dir.join(TIMESERIES_FILE), &timeseries_csv(&artifacts.outcome.records))?,
        write(dir.join(METRICS_FILE), &metrics_document(artifacts).to_json())?,
        write(dir.join(SCENARIO_FILE), &artifacts.scenario.to_toml_string())?,
    ];
    for (step, problem) in &artifacts.outcome.qp_problems {
        let path = dir.join(format!("qp_step_{step}.txt"));
        written.push(write(path, &crate::qpdump::to_text(problem))?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_lists_every_column_once() {
        let csv = timeseries_csv(&[]);
        let mut lines = csv.lines();
        let comment = lines.next().unwrap();
        assert!(comment.starts_with("# "));
        for (c, _) in COLUMNS {
            assert!(comment.contains(&format!("{c} [")), "{c}");
        }
        assert_eq!(lines.next().unwrap().split(',').count(), COLUMNS.len());
        assert!(lines.next().is_none());
    }

    #[test]
    fn float_text_round_trips() {
        for x in [0.1, -1e-300, 1.0 / 3.0, 12345.678e10, 0.0, -0.0] {
            assert_eq!(num(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }
}
