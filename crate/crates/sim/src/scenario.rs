//! Scenario files.
//!
//! A scenario is a TOML document with a required `[path]` table and
//! optional `[initial]`, `[controller]`, `[actuator]`, `[vehicle]`, `[tire]`
//! and `[noise]` tables. Omitted keys take the library defaults, and the
//! resolved scenario (every key filled in) is what gets echoed next to the
//! run outputs.
//!
//! Curvatures in the file are unsigned magnitudes; `direction` decides the
//! turning sense.

use crate::SimError;
use drift_core::actuator::InverseTireConfig;
use drift_core::mpc::MpcConfig;
use drift_core::qp::QpSettings;
use drift_core::sim::{ClosedLoopConfig, MeasurementNoise};
use drift_core::trajectory::{CurvatureProfile, HeadingCoupling, ReferencePath, YawRateGains};
use drift_core::vehicle::{Plant, TireParams, VehicleParams, VehicleState};
use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Clockwise,
    Counterclockwise,
}

impl Direction {
    /// Sign applied to curvature magnitudes.
    fn sign(self) -> f64 {
        match self {
            Direction::Clockwise => 1.0,
            Direction::Counterclockwise => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PathSpec {
    Straight {
        length: f64,
    },
    Circle {
        radius: f64,
        direction: Direction,
        /// Arc length to generate (m); laps are unrolled.
        length: f64,
    },
    /// Curvature ramps linearly from `curvature_start` to `curvature_end`
    /// over `ramp_length` and holds afterwards.
    LinearCurvature {
        curvature_start: f64,
        curvature_end: f64,
        ramp_length: f64,
        direction: Direction,
        length: f64,
    },
}

impl PathSpec {
    pub fn length(&self) -> f64 {
        match *self {
            PathSpec::Straight { length }
            | PathSpec::Circle { length, .. }
            | PathSpec::LinearCurvature { length, .. } => length,
        }
    }

    pub fn profile(&self) -> CurvatureProfile {
        match *self {
            PathSpec::Straight { .. } => CurvatureProfile::Constant(0.0),
            PathSpec::Circle { radius, direction, .. } => CurvatureProfile::Constant(direction.sign() / radius),
            PathSpec::LinearCurvature {
                curvature_start,
                curvature_end,
                ramp_length,
                direction,
                ..
            } => CurvatureProfile::Linear {
                start: direction.sign() * curvature_start,
                end: direction.sign() * curvature_end,
                length: ramp_length,
            },
        }
    }

    fn validate(&self) -> Result<(), String> {
        let positive = |v: f64, what: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(format!("path {what} must be positive and finite, got {v}"))
            }
        };
        positive(self.length(), "length")?;
        match *self {
            PathSpec::Straight { .. } => Ok(()),
            PathSpec::Circle { radius, .. } => positive(radius, "radius"),
            PathSpec::LinearCurvature {
                curvature_start,
                curvature_end,
                ramp_length,
                ..
            } => {
                positive(ramp_length, "ramp_length")?;
                for (v, what) in [(curvature_start, "curvature_start"), (curvature_end, "curvature_end")] {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(format!("{what} must be a finite magnitude, got {v}"));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Deviations from the default start on the path origin, tangent to it,
/// with `beta = omega = 0` and `v` equal to the reference speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSpec {
    pub v: Option<f64>,
    pub beta: f64,
    pub omega: f64,
    /// Offset to the left of the path (m).
    pub lateral_offset: f64,
    /// Heading offset from the path tangent (rad).
    pub heading_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSpec {
    pub compensation: bool,
    /// Adds the unit `e_omega -> d e_phi/dt` entry to the error model.
    pub corrected_a: bool,
    pub prediction_horizon: usize,
    pub control_horizon: usize,
    pub q: [f64; 4],
    pub r: [f64; 4],
    pub sample_time: f64,
    pub gamma: f64,
    pub fx_rate_limit: f64,
    pub fy_rate_limit: f64,
    pub filter_cutoff: f64,
    pub yaw_gain_lateral: f64,
    pub yaw_gain_heading: f64,
    pub qp_tolerance: f64,
    pub qp_max_iter: usize,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        let c = MpcConfig::default();
        Self {
            compensation: c.compensation_enabled,
            corrected_a: c.coupling == HeadingCoupling::YawRate,
            prediction_horizon: c.prediction_horizon,
            control_horizon: c.control_horizon,
            q: c.q.diagonal().into(),
            r: c.r.diagonal().into(),
            sample_time: c.sample_time,
            gamma: c.gamma,
            fx_rate_limit: c.fx_rate_limit,
            fy_rate_limit: c.fy_rate_limit,
            filter_cutoff: c.filter_cutoff,
            yaw_gain_lateral: c.yaw_gains.lateral,
            yaw_gain_heading: c.yaw_gains.heading,
            qp_tolerance: c.qp.tol,
            qp_max_iter: c.qp.max_iter,
        }
    }
}

impl ControllerSpec {
    pub fn to_config(&self) -> MpcConfig {
        MpcConfig {
            prediction_horizon: self.prediction_horizon,
            control_horizon: self.control_horizon,
            q: Matrix4::from_diagonal(&Vector4::from(self.q)),
            r: Matrix4::from_diagonal(&Vector4::from(self.r)),
            sample_time: self.sample_time,
            gamma: self.gamma,
            fx_rate_limit: self.fx_rate_limit,
            fy_rate_limit: self.fy_rate_limit,
            compensation_enabled: self.compensation,
            filter_cutoff: self.filter_cutoff,
            coupling: if self.corrected_a {
                HeadingCoupling::YawRate
            } else {
                HeadingCoupling::Literal
            },
            yaw_gains: YawRateGains {
                lateral: self.yaw_gain_lateral,
                heading: self.yaw_gain_heading,
            },
            qp: QpSettings {
                tol: self.qp_tolerance,
                max_iter: self.qp_max_iter,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActuatorSpec {
    pub epsilon_ratio: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    pub delta_max_deg: f64,
}

impl Default for ActuatorSpec {
    fn default() -> Self {
        let c = InverseTireConfig::default();
        Self {
            epsilon_ratio: c.epsilon_ratio,
            tolerance: c.tolerance,
            max_iter: c.max_iter,
            delta_max_deg: 35.0,
        }
    }
}

impl ActuatorSpec {
    pub fn to_config(&self) -> InverseTireConfig {
        InverseTireConfig {
            epsilon_ratio: self.epsilon_ratio,
            tolerance: self.tolerance,
            max_iter: self.max_iter,
            delta_max: self.delta_max_deg.to_radians(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleSpec {
    pub mass: f64,
    pub yaw_inertia: f64,
    pub cg_to_front: f64,
    pub cg_to_rear: f64,
    pub wheel_radius: f64,
    pub mu: f64,
    pub gravity: f64,
}

impl Default for VehicleSpec {
    fn default() -> Self {
        let p = VehicleParams::default();
        Self {
            mass: p.mass,
            yaw_inertia: p.yaw_inertia,
            cg_to_front: p.cg_to_front,
            cg_to_rear: p.cg_to_rear,
            wheel_radius: p.wheel_radius,
            mu: p.mu,
            gravity: p.gravity,
        }
    }
}

impl VehicleSpec {
    pub fn to_params(&self) -> VehicleParams {
        VehicleParams {
            mass: self.mass,
            yaw_inertia: self.yaw_inertia,
            cg_to_front: self.cg_to_front,
            cg_to_rear: self.cg_to_rear,
            wheel_radius: self.wheel_radius,
            mu: self.mu,
            gravity: self.gravity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TireSpec {
    pub stiffness: f64,
    pub shape: f64,
}

impl Default for TireSpec {
    fn default() -> Self {
        let t = TireParams::default();
        Self {
            stiffness: t.stiffness,
            shape: t.shape,
        }
    }
}

/// Uniform measurement noise half-widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub beta: f64,
    pub omega: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Simulated time (s).
    pub duration: f64,
    pub reference_speed: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    pub path: PathSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub controller: ControllerSpec,
    #[serde(default)]
    pub actuator: ActuatorSpec,
    #[serde(default)]
    pub vehicle: VehicleSpec,
    #[serde(default)]
    pub tire: TireSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
}

fn default_substeps() -> usize {
    10
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| SimError::Scenario(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            SimError::Scenario(msg) => SimError::Scenario(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The resolved scenario with every default spelled out.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |msg: String| Err(SimError::Scenario(msg));
        if self.name.trim().is_empty() {
            return fail("scenario name must not be empty".into());
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return fail(format!("duration must be positive, got {}", self.duration));
        }
        if !(self.reference_speed.is_finite() && self.reference_speed > 0.0) {
            return fail(format!(
                "reference_speed must be positive, got {}",
                self.reference_speed
            ));
        }
        self.path.validate().map_err(SimError::Scenario)?;
        let cfg = self.closed_loop_config()?;
        cfg.validate()
            .map_err(|e| SimError::Scenario(format!("invalid configuration: {e}")))?;
        let steps = self.duration / self.controller.sample_time;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return fail(format!(
                "duration {} s is not a whole number of {} s control periods",
                self.duration, self.controller.sample_time
            ));
        }
        self.reference_path()?;
        Ok(())
    }

    pub fn reference_path(&self) -> Result<ReferencePath, SimError> {
        ReferencePath::new(
            self.path.profile(),
            self.reference_speed,
            self.path.length(),
            (0.0, 0.0),
            0.0,
        )
        .map_err(|e| SimError::Scenario(format!("invalid path: {e}")))
    }

    pub fn initial_state(&self) -> VehicleState {
        let i = &self.initial;
        let heading = i.heading_offset;
        VehicleState {
            beta: i.beta,
            omega: i.omega,
            v: i.v.unwrap_or(self.reference_speed),
            phi: heading - i.beta,
            x: 0.0,
            y: i.lateral_offset,
        }
    }

    pub fn closed_loop_config(&self) -> Result<ClosedLoopConfig, SimError> {
        let plant = Plant::new(
            self.vehicle.to_params(),
            TireParams {
                stiffness: self.tire.stiffness,
                shape: self.tire.shape,
            },
        )
        .map_err(|e| SimError::Scenario(format!("invalid vehicle or tire parameters: {e}")))?;
        Ok(ClosedLoopConfig {
            plant,
            controller: self.controller.to_config(),
            actuator: self.actuator.to_config(),
            initial: self.initial_state(),
            duration: self.duration,
            substeps: self.substeps,
            noise: MeasurementNoise {
                beta: self.noise.beta,
                omega: self.noise.omega,
                v: self.noise.v,
            },
            seed: self.seed,
            capture_qp_steps: Vec::new(),
        })
    }
}
