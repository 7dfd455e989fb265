//! Post-run analysis: drift detection, tire utilization and summary metrics.
//!
//! Everything here works on [`MetricSample`]s so that metrics can be
//! recomputed from a stored time series as well as from a live run.

use crate::sim::TimeSeriesRecord;
use crate::vehicle::TireForces;
use libm::sqrt;

/// The per-step quantities the metrics depend on.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricSample {
    pub time: f64,
    pub beta: f64,
    pub omega: f64,
    pub lateral_error: f64,
    pub front_utilization: f64,
    pub rear_utilization: f64,
    pub fallback: bool,
    pub steering_converged: bool,
    /// Either steering angle sits on its limit.
    pub steering_saturated: bool,
}

impl From<&TimeSeriesRecord> for MetricSample {
    fn from(r: &TimeSeriesRecord) -> Self {
        Self {
            time: r.time,
            beta: r.state.beta,
            omega: r.state.omega,
            lateral_error: r.errors.lateral,
            front_utilization: r.front_utilization(),
            rear_utilization: r.rear_utilization(),
            fallback: r.fallback,
            steering_converged: r.actuator_diagnostics.all_converged(),
            steering_saturated: r.actuator_diagnostics.front.saturated || r.actuator_diagnostics.rear.saturated,
        }
    }
}

/// Combined tire force over the friction limit, per axle.
pub fn tire_utilization(forces: &TireForces, front_limit: f64, rear_limit: f64) -> (f64, f64) {
    (
        forces.front.magnitude() / front_limit,
        forces.rear.magnitude() / rear_limit,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftCriteria {
    /// Minimum `|beta|` (rad) for a sample to count as drifting.
    pub min_sideslip: f64,
    /// How long (s) the drift signature must hold to mark onset.
    pub hold: f64,
    /// Length (s) of the trailing steady-state window.
    pub window: f64,
    /// Lateral-error variance (m^2) below which the window counts as settled.
    pub settle_variance: f64,
}

impl Default for DriftCriteria {
    fn default() -> Self {
        Self {
            min_sideslip: 5f64.to_radians(),
            hold: 1.0,
            window: 20.0,
            settle_variance: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftDetection {
    pub onset_step: Option<usize>,
    pub onset_time: Option<f64>,
    /// Index of the first sample in the steady window.
    pub window_start: usize,
    /// Lateral-error variance inside the window is below the threshold.
    pub settled: bool,
    /// Drift was detected and `beta`, `omega` have opposite signs at every
    /// sample of the window.
    pub sustained: bool,
}

fn opposite_signs(s: &MetricSample) -> bool {
    (s.beta > 0.0 && s.omega < 0.0) || (s.beta < 0.0 && s.omega > 0.0)
}

fn steps(duration: f64, sample_time: f64) -> usize {
    libm::round(duration / sample_time) as usize
}

pub fn detect_drift(samples: &[MetricSample], sample_time: f64, criteria: &DriftCriteria) -> DriftDetection {
    let n = samples.len();
    let hold = steps(criteria.hold, sample_time).max(1);
    let drifting = |s: &MetricSample| opposite_signs(s) && s.beta.abs() > criteria.min_sideslip;
    let mut onset_step = None;
    let mut run = 0;
    for (k, s) in samples.iter().enumerate() {
        if drifting(s) {
            run += 1;
            if run == hold {
                onset_step = Some(k + 1 - hold);
                break;
            }
        } else {
            run = 0;
        }
    }
    let window_start = n.saturating_sub(steps(criteria.window, sample_time));
    let window = &samples[window_start..];
    let settled = !window.is_empty() && variance(window.iter().map(|s| s.lateral_error)) <= criteria.settle_variance;
    let sustained = onset_step.is_some() && !window.is_empty() && window.iter().all(opposite_signs);
    DriftDetection {
        onset_step,
        onset_time: onset_step.map(|k| samples[k].time),
        window_start,
        settled,
        sustained,
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

fn variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    match mean(values.clone()) {
        Some(m) => mean(values.map(|v| (v - m) * (v - m))).unwrap_or(0.0),
        None => 0.0,
    }
}

fn max(values: impl Iterator<Item = f64>) -> Option<f64> {
    values.fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
}

/// Summary of a run. Fields that need at least one sample are `None` for an
/// empty run; drift onset is `None` when no drift was detected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub steps: usize,
    pub max_abs_lateral_error: Option<f64>,
    pub rms_lateral_error: Option<f64>,
    /// Mean signed lateral error over the steady window.
    pub steady_lateral_error: Option<f64>,
    /// Mean `|e_d|` over the steady window.
    pub steady_abs_lateral_error: Option<f64>,
    pub drift_onset_time: Option<f64>,
    pub sustained_drift: bool,
    pub settled: bool,
    /// Mean sideslip (deg) over the steady window.
    pub steady_sideslip_deg: Option<f64>,
    /// Smallest `|beta|` (deg) inside the steady window.
    pub min_abs_steady_sideslip_deg: Option<f64>,
    /// Mean yaw rate (rad/s) over the steady window.
    pub steady_yaw_rate: Option<f64>,
    pub max_front_utilization: Option<f64>,
    pub max_rear_utilization: Option<f64>,
    /// Share of the steady window with rear utilization at most 0.9.
    pub steady_rear_utilization_share: Option<f64>,
    pub qp_fallbacks: usize,
    pub steering_nonconverged: usize,
    pub steering_saturated: usize,
}

/// Rear utilization level used for [`RunMetrics::steady_rear_utilization_share`].
pub const REAR_UTILIZATION_LEVEL: f64 = 0.9;

pub fn compute_metrics(samples: &[MetricSample], sample_time: f64, criteria: &DriftCriteria) -> RunMetrics {
    let drift = detect_drift(samples, sample_time, criteria);
    let window = &samples[drift.window_start..];
    let abs_err = |s: &MetricSample| s.lateral_error.abs();
    let share = (!window.is_empty()).then(|| {
        window
            .iter()
            .filter(|s| s.rear_utilization <= REAR_UTILIZATION_LEVEL)
            .count() as f64
            / window.len() as f64
    });
    RunMetrics {
        steps: samples.len(),
        max_abs_lateral_error: max(samples.iter().map(abs_err)),
        rms_lateral_error: mean(samples.iter().map(|s| s.lateral_error * s.lateral_error)).map(sqrt),
        steady_lateral_error: mean(window.iter().map(|s| s.lateral_error)),
        steady_abs_lateral_error: mean(window.iter().map(abs_err)),
        drift_onset_time: drift.onset_time,
        sustained_drift: drift.sustained,
        settled: drift.settled,
        steady_sideslip_deg: mean(window.iter().map(|s| s.beta.to_degrees())),
        min_abs_steady_sideslip_deg: window
            .iter()
            .map(|s| s.beta.abs().to_degrees())
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.min(v)))),
        steady_yaw_rate: mean(window.iter().map(|s| s.omega)),
        max_front_utilization: max(samples.iter().map(|s| s.front_utilization)),
        max_rear_utilization: max(samples.iter().map(|s| s.rear_utilization)),
        steady_rear_utilization_share: share,
        qp_fallbacks: samples.iter().filter(|s| s.fallback).count(),
        steering_nonconverged: samples.iter().filter(|s| !s.steering_converged).count(),
        steering_saturated: samples.iter().filter(|s| s.steering_saturated).count(),
    }
}
