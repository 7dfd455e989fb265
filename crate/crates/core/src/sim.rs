//! Closed-loop simulation: plant, upper-layer MPC and lower-layer actuator
//! allocation wired together at the controller sample time.

use crate::actuator::{regulate, ActuatorCommand, ActuatorDiagnostics, InverseTireConfig};
use crate::mpc::{MpcConfig, MpcController};
use crate::qp::{QpProblem, QpStatus};
use crate::trajectory::{ReferencePath, TrackingError};
use crate::vehicle::{AxleForceCommand, Plant, TireForces, VehicleState};
use crate::Error;
use alloc::vec::Vec;
use libm::round;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Uniform measurement noise half-widths applied to the controller's view of
/// the state. All zero by default.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeasurementNoise {
    pub beta: f64,
    pub omega: f64,
    pub v: f64,
}

impl MeasurementNoise {
    pub fn is_zero(&self) -> bool {
        self.beta == 0.0 && self.omega == 0.0 && self.v == 0.0
    }
}

#[derive(Debug, Clone)]
pub struct ClosedLoopConfig {
    pub plant: Plant,
    pub controller: MpcConfig,
    pub actuator: InverseTireConfig,
    pub initial: VehicleState,
    /// Simulated time (s); the loop runs `round(duration / T)` control steps.
    pub duration: f64,
    /// RK4 substeps per control period.
    pub substeps: usize,
    pub noise: MeasurementNoise,
    pub seed: u64,
    /// Control steps whose QP is kept in [`RunOutcome::qp_problems`].
    pub capture_qp_steps: Vec<usize>,
}

impl ClosedLoopConfig {
    pub fn new(initial: VehicleState, duration: f64) -> Self {
        Self {
            plant: Plant::default(),
            controller: MpcConfig::default(),
            actuator: InverseTireConfig::default(),
            initial,
            duration,
            substeps: 10,
            noise: MeasurementNoise::default(),
            seed: 0,
            capture_qp_steps: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.plant.params.validate()?;
        self.plant.tire.validate()?;
        self.controller.validate()?;
        self.actuator.validate()?;
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(Error::InvalidParameter("duration must be non-negative"));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidParameter("at least one plant substep is required"));
        }
        if !self.initial.is_finite() || self.initial.v <= 0.0 {
            return Err(Error::InvalidParameter(
                "initial state must be finite with positive speed",
            ));
        }
        let n = self.noise;
        if !(n.beta >= 0.0 && n.omega >= 0.0 && n.v >= 0.0) {
            return Err(Error::InvalidParameter("noise amplitudes must be non-negative"));
        }
        Ok(())
    }

    pub fn step_count(&self) -> usize {
        round(self.duration / self.controller.sample_time) as usize
    }
}

/// Everything observed during one control period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSeriesRecord {
    pub step: usize,
    pub time: f64,
    /// True plant state at the start of the period.
    pub state: VehicleState,
    pub s_ref: f64,
    pub errors: TrackingError,
    pub omega_des: f64,
    pub command: AxleForceCommand,
    pub increment: AxleForceCommand,
    pub actuator: ActuatorCommand,
    /// Tire-frame forces realized by the plant at the start of the period.
    pub tire_forces: TireForces,
    /// Friction limits `mu F_z` of the front and rear axle.
    pub friction_limits: (f64, f64),
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    pub fallback: bool,
    pub disturbance_norm: f64,
    pub actuator_diagnostics: ActuatorDiagnostics,
}

impl TimeSeriesRecord {
    pub fn front_utilization(&self) -> f64 {
        self.tire_forces.front.magnitude() / self.friction_limits.0
    }

    pub fn rear_utilization(&self) -> f64 {
        self.tire_forces.rear.magnitude() / self.friction_limits.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Abort {
    pub step: usize,
    pub time: f64,
    pub error: Error,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<TimeSeriesRecord>,
    /// Set when the loop stopped early; `records` then holds the steps that
    /// completed.
    pub aborted: Option<Abort>,
    pub qp_problems: Vec<(usize, QpProblem)>,
}

fn uniform(rng: &mut ChaCha8Rng, half_width: f64) -> f64 {
    if half_width == 0.0 {
        return 0.0;
    }
    let unit = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (2.0 * unit - 1.0) * half_width
}

/// Runs the closed loop. Each period measures the state, runs the MPC
/// (which updates its disturbance estimate from the previous transition),
/// allocates steering and torque, records, and integrates the plant.
pub fn run(config: &ClosedLoopConfig, path: &ReferencePath) -> Result<RunOutcome, Error> {
    config.validate()?;
    let plant = &config.plant;
    let params = plant.params;
    let loads = plant.loads();
    let limits = (params.mu * loads.front, params.mu * loads.rear);
    let sample_time = config.controller.sample_time;
    let mut controller = MpcController::new(config.controller.clone(), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps = config.step_count();
    let mut records = Vec::with_capacity(steps);
    let mut state = config.initial;
    let mut qp_problems = Vec::new();

    for step in 0..steps {
        let time = step as f64 * sample_time;
        let abort = |error: Error| Abort { step, time, error };
        let mut measured = state;
        if !config.noise.is_zero() {
            measured.beta += uniform(&mut rng, config.noise.beta);
            measured.omega += uniform(&mut rng, config.noise.omega);
            measured.v += uniform(&mut rng, config.noise.v);
        }
        let capture = config.capture_qp_steps.contains(&step);
        controller.set_keep_problem(capture);
        let result = controller.control_step(&measured, path).and_then(|(u, diag)| {
            let (cmd, act) = regulate(&u, &measured, &config.actuator, &params, &plant.tire)?;
            let tire_forces = plant.tire_forces(&state, &cmd.steering(), &cmd.torques())?;
            let record = TimeSeriesRecord {
                step,
                time,
                state,
                s_ref: diag.reference.s,
                errors: diag.errors,
                omega_des: diag.omega_des,
                command: u,
                increment: diag.increment,
                actuator: cmd,
                tire_forces,
                friction_limits: limits,
                qp_status: diag.qp_status,
                qp_iterations: diag.qp_iterations,
                fallback: diag.fallback,
                disturbance_norm: diag.d_filt.norm(),
                actuator_diagnostics: act,
            };
            let next = plant.advance(&state, &cmd.steering(), &cmd.torques(), sample_time, config.substeps)?;
            Ok((record, next))
        });
        if let Some(problem) = controller.take_last_problem().filter(|_| capture) {
            qp_problems.push((step, problem));
        }
        match result {
            Ok((record, next)) => {
                records.push(record);
                state = next;
            }
            Err(error) => {
                log::error!("closed loop aborted at t = {time:.2} s: {error}");
                return Ok(RunOutcome {
                    records,
                    aborted: Some(abort(error)),
                    qp_problems,
                });
            }
        }
    }
    Ok(RunOutcome {
        records,
        aborted: None,
        qp_problems,
    })
}
