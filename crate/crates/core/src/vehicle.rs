//! Nonlinear single-track (bicycle) plant for a 4WD-4WS vehicle.
//!
//! The state is sideslip `beta`, yaw rate `omega`, speed `v`, yaw angle `phi`
//! and global position. Inputs to the force-level dynamics are body-frame axle
//! forces; the closed-loop plant computes those from steering angles and axle
//! torques through the Magic Formula lateral tire model, with the
//! longitudinal tire force taken as `T / r` (no slip-ratio dynamics).
//!
//! Sign conventions: `beta`, `omega`, `phi` and steering angles are positive
//! counterclockwise seen from above; body `X` points forward and `Y` left.

use crate::Error;
use libm::{atan, cos, sin, sqrt};

/// Speed below which integration is aborted.
pub const SPEED_FLOOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleParams {
    /// Mass (kg).
    pub mass: f64,
    /// Yaw moment of inertia (kg m^2).
    pub yaw_inertia: f64,
    /// CG to front axle (m).
    pub cg_to_front: f64,
    /// CG to rear axle (m).
    pub cg_to_rear: f64,
    /// Wheel radius (m).
    pub wheel_radius: f64,
    /// Road adhesion coefficient.
    pub mu: f64,
    /// Gravitational acceleration (m/s^2).
    pub gravity: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1600.0,
            yaw_inertia: 1536.7,
            cg_to_front: 1.015,
            cg_to_rear: 1.895,
            wheel_radius: 0.325,
            mu: 1.0,
            gravity: 9.81,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), Error> {
        let positive = [
            (self.mass, "mass must be positive"),
            (self.yaw_inertia, "yaw inertia must be positive"),
            (self.cg_to_front, "CG-to-front distance must be positive"),
            (self.cg_to_rear, "CG-to-rear distance must be positive"),
            (self.wheel_radius, "wheel radius must be positive"),
            (self.mu, "adhesion coefficient must be positive"),
            (self.gravity, "gravity must be positive"),
        ];
        for (value, what) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidParameter(what));
            }
        }
        Ok(())
    }

    pub fn wheelbase(&self) -> f64 {
        self.cg_to_front + self.cg_to_rear
    }
}

/// Simplified Magic Formula coefficients.
///
/// The stiffness factor keeps its sign: with a negative `stiffness` a positive
/// slip angle produces a negative (restoring) lateral force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TireParams {
    pub stiffness: f64,
    pub shape: f64,
}

impl Default for TireParams {
    fn default() -> Self {
        Self {
            stiffness: -11.52,
            shape: 1.62,
        }
    }
}

impl TireParams {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.shape.is_finite() && self.shape > 1.0) {
            return Err(Error::InvalidParameter("tire shape factor must exceed 1"));
        }
        if !self.stiffness.is_finite() || self.stiffness == 0.0 {
            return Err(Error::InvalidParameter("tire stiffness factor must be nonzero"));
        }
        Ok(())
    }

    /// Slip angle at which `|F_y|` reaches `mu * F_z`.
    pub fn peak_slip_angle(&self) -> f64 {
        libm::tan(core::f64::consts::FRAC_PI_2 / self.shape) / self.stiffness
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleState {
    /// Sideslip angle (rad).
    pub beta: f64,
    /// Yaw rate (rad/s).
    pub omega: f64,
    /// Speed (m/s).
    pub v: f64,
    /// Yaw angle (rad).
    pub phi: f64,
    /// Global position (m).
    pub x: f64,
    pub y: f64,
}

impl VehicleState {
    pub fn is_finite(&self) -> bool {
        [self.beta, self.omega, self.v, self.phi, self.x, self.y]
            .iter()
            .all(|c| c.is_finite())
    }

    /// Direction of travel in the global frame, `phi + beta`.
    pub fn course(&self) -> f64 {
        self.phi + self.beta
    }

    fn offset(&self, k: f64, d: &StateDerivative) -> Self {
        Self {
            beta: self.beta + k * d.beta,
            omega: self.omega + k * d.omega,
            v: self.v + k * d.v,
            phi: self.phi + k * d.phi,
            x: self.x + k * d.x,
            y: self.y + k * d.y,
        }
    }
}

/// Time derivative of a [`VehicleState`], component for component.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateDerivative {
    pub beta: f64,
    pub omega: f64,
    pub v: f64,
    pub phi: f64,
    pub x: f64,
    pub y: f64,
}

/// Body-frame axle forces; the control vector of the upper layer.
///
/// The array order `[F_Xf, F_Xr, F_Yf, F_Yr]` matches the columns of the
/// input matrix of the error model.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AxleForceCommand {
    pub fx_front: f64,
    pub fx_rear: f64,
    pub fy_front: f64,
    pub fy_rear: f64,
}

impl AxleForceCommand {
    pub fn to_array(self) -> [f64; 4] {
        [self.fx_front, self.fx_rear, self.fy_front, self.fy_rear]
    }

    pub fn from_array(u: [f64; 4]) -> Self {
        Self {
            fx_front: u[0],
            fx_rear: u[1],
            fy_front: u[2],
            fy_rear: u[3],
        }
    }

    /// Yaw moment about the CG, `a F_Yf - b F_Yr`.
    pub fn yaw_moment(&self, params: &VehicleParams) -> f64 {
        params.cg_to_front * self.fy_front - params.cg_to_rear * self.fy_rear
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SteeringAngles {
    pub front: f64,
    pub rear: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AxleTorques {
    pub front: f64,
    pub rear: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxleLoads {
    pub front: f64,
    pub rear: f64,
}

/// Tire-frame force pair of one axle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TireForce {
    pub longitudinal: f64,
    pub lateral: f64,
}

impl TireForce {
    pub fn magnitude(&self) -> f64 {
        libm::hypot(self.longitudinal, self.lateral)
    }
}

/// Tire forces actually produced by the plant on both axles.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TireForces {
    pub front: TireForce,
    pub rear: TireForce,
}

/// Lateral tire force `mu F_z sin(C atan(B alpha))`.
pub fn lateral_tire_force(alpha: f64, fz: f64, mu: f64, tire: &TireParams) -> f64 {
    mu * fz * sin(tire.shape * atan(tire.stiffness * alpha))
}

/// Kinematic velocity angle at an axle relative to the body axis, before
/// steering is subtracted. `lever` is `+a` for the front axle and `-b` for
/// the rear.
pub(crate) fn axle_velocity_angle(state: &VehicleState, lever: f64) -> f64 {
    atan((state.v * sin(state.beta) + lever * state.omega) / (state.v * cos(state.beta)))
}

/// Front and rear tire slip angles.
pub fn slip_angles(state: &VehicleState, steer: &SteeringAngles, params: &VehicleParams) -> Result<(f64, f64), Error> {
    check_speed(state.v)?;
    let alpha_f = axle_velocity_angle(state, params.cg_to_front) - steer.front;
    let alpha_r = axle_velocity_angle(state, -params.cg_to_rear) - steer.rear;
    Ok((alpha_f, alpha_r))
}

/// Force-level dynamics under body-frame axle forces, plus planar kinematics.
pub fn plant_derivatives(
    state: &VehicleState,
    u: &AxleForceCommand,
    params: &VehicleParams,
) -> Result<StateDerivative, Error> {
    check_speed(state.v)?;
    let fx = u.fx_front + u.fx_rear;
    let fy = u.fy_front + u.fy_rear;
    let (sb, cb) = (sin(state.beta), cos(state.beta));
    let course = state.course();
    Ok(StateDerivative {
        beta: (fy * cb - fx * sb) / (params.mass * state.v) - state.omega,
        omega: u.yaw_moment(params) / params.yaw_inertia,
        v: (fx * cb + fy * sb) / params.mass,
        phi: state.omega,
        x: state.v * cos(course),
        y: state.v * sin(course),
    })
}

/// Rotates tire-frame forces of a wheel steered by `delta` into the body
/// frame.
pub fn tire_to_body_forces(fx_tire: f64, fy_tire: f64, delta: f64) -> (f64, f64) {
    let (s, c) = (sin(delta), cos(delta));
    (fx_tire * c - fy_tire * s, fx_tire * s + fy_tire * c)
}

/// Static vertical loads split by lever arms.
pub fn static_axle_loads(params: &VehicleParams) -> AxleLoads {
    let weight = params.mass * params.gravity;
    let l = params.wheelbase();
    AxleLoads {
        front: weight * params.cg_to_rear / l,
        rear: weight * params.cg_to_front / l,
    }
}

/// Limits a tire force pair to the friction circle of radius `limit`,
/// removing the excess from the lateral component.
pub fn clip_to_friction_circle(force: TireForce, limit: f64) -> TireForce {
    let longitudinal = force.longitudinal.clamp(-limit, limit);
    let lateral_max = sqrt((limit * limit - longitudinal * longitudinal).max(0.0));
    TireForce {
        longitudinal,
        lateral: force.lateral.clamp(-lateral_max, lateral_max),
    }
}

fn check_speed(v: f64) -> Result<(), Error> {
    if !v.is_finite() {
        return Err(Error::NonFiniteState);
    }
    if v <= 0.0 {
        return Err(Error::NonPositiveSpeed { v });
    }
    Ok(())
}

/// The closed-loop plant: vehicle and tire parameters together.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Plant {
    pub params: VehicleParams,
    pub tire: TireParams,
}

impl Plant {
    pub fn new(params: VehicleParams, tire: TireParams) -> Result<Self, Error> {
        params.validate()?;
        tire.validate()?;
        Ok(Self { params, tire })
    }

    pub fn loads(&self) -> AxleLoads {
        static_axle_loads(&self.params)
    }

    /// Tire-frame forces for the given actuator inputs, after friction-circle
    /// clipping.
    pub fn tire_forces(
        &self,
        state: &VehicleState,
        steer: &SteeringAngles,
        torques: &AxleTorques,
    ) -> Result<TireForces, Error> {
        let (alpha_f, alpha_r) = slip_angles(state, steer, &self.params)?;
        let loads = self.loads();
        let mu = self.params.mu;
        let r = self.params.wheel_radius;
        let axle = |alpha: f64, fz: f64, torque: f64| {
            clip_to_friction_circle(
                TireForce {
                    longitudinal: torque / r,
                    lateral: lateral_tire_force(alpha, fz, mu, &self.tire),
                },
                mu * fz,
            )
        };
        Ok(TireForces {
            front: axle(alpha_f, loads.front, torques.front),
            rear: axle(alpha_r, loads.rear, torques.rear),
        })
    }

    /// Body-frame axle forces produced by the actuators at `state`.
    pub fn body_forces(
        &self,
        state: &VehicleState,
        steer: &SteeringAngles,
        torques: &AxleTorques,
    ) -> Result<AxleForceCommand, Error> {
        let tf = self.tire_forces(state, steer, torques)?;
        let (fx_front, fy_front) = tire_to_body_forces(tf.front.longitudinal, tf.front.lateral, steer.front);
        let (fx_rear, fy_rear) = tire_to_body_forces(tf.rear.longitudinal, tf.rear.lateral, steer.rear);
        Ok(AxleForceCommand {
            fx_front,
            fx_rear,
            fy_front,
            fy_rear,
        })
    }

    pub fn derivatives(
        &self,
        state: &VehicleState,
        steer: &SteeringAngles,
        torques: &AxleTorques,
    ) -> Result<StateDerivative, Error> {
        let u = self.body_forces(state, steer, torques)?;
        plant_derivatives(state, &u, &self.params)
    }

    /// One classical RK4 step with actuator inputs held constant; tire forces
    /// are re-evaluated at every stage.
    pub fn step(
        &self,
        state: &VehicleState,
        steer: &SteeringAngles,
        torques: &AxleTorques,
        dt: f64,
    ) -> Result<VehicleState, Error> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidParameter("time step must be positive"));
        }
        let k1 = self.derivatives(state, steer, torques)?;
        let k2 = self.derivatives(&state.offset(0.5 * dt, &k1), steer, torques)?;
        let k3 = self.derivatives(&state.offset(0.5 * dt, &k2), steer, torques)?;
        let k4 = self.derivatives(&state.offset(dt, &k3), steer, torques)?;
        let combined = StateDerivative {
            beta: k1.beta + 2.0 * k2.beta + 2.0 * k3.beta + k4.beta,
            omega: k1.omega + 2.0 * k2.omega + 2.0 * k3.omega + k4.omega,
            v: k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v,
            phi: k1.phi + 2.0 * k2.phi + 2.0 * k3.phi + k4.phi,
            x: k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x,
            y: k1.y + 2.0 * k2.y + 2.0 * k3.y + k4.y,
        };
        let next = state.offset(dt / 6.0, &combined);
        if !next.is_finite() {
            return Err(Error::NonFiniteState);
        }
        if next.v < SPEED_FLOOR {
            return Err(Error::SpeedBelowFloor {
                v: next.v,
                floor: SPEED_FLOOR,
            });
        }
        Ok(next)
    }

    /// Advances `duration` seconds in `substeps` equal RK4 steps.
    pub fn advance(
        &self,
        state: &VehicleState,
        steer: &SteeringAngles,
        torques: &AxleTorques,
        duration: f64,
        substeps: usize,
    ) -> Result<VehicleState, Error> {
        let substeps = substeps.max(1);
        let dt = duration / substeps as f64;
        let mut s = *state;
        for _ in 0..substeps {
            s = self.step(&s, steer, torques, dt)?;
        }
        Ok(s)
    }
}
