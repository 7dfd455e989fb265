//! Actuator regulation: turns body-frame axle force commands into steering
//! angles and axle torques.
//!
//! Each axle's steering angle is the root of
//!
//! ```text
//! L(delta) = f(-F_X sin delta + F_Y cos delta) - theta_axle + delta
//! ```
//!
//! where `f` is the inverse lateral Magic Formula and `theta_axle` the
//! kinematic velocity angle at the axle. The root is found with Newton's
//! method from `delta = 0`, clamping the tire-frame lateral force to the
//! friction limit and the iterate to `±delta_max` on every step.

use crate::vehicle::{
    axle_velocity_angle, static_axle_loads, AxleForceCommand, AxleTorques, SteeringAngles, TireParams, VehicleParams,
    VehicleState,
};
use crate::Error;
use core::f64::consts::PI;
use libm::{asin, cos, sin, sqrt, tan};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axle {
    Front,
    Rear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseTireConfig {
    /// Width of the band below `mu F_z` where the second slip-angle branch
    /// is also reported, as a fraction of `mu F_z`.
    pub epsilon_ratio: f64,
    /// Newton step tolerance (rad).
    pub tolerance: f64,
    pub max_iter: usize,
    /// Steering limit (rad).
    pub delta_max: f64,
}

impl Default for InverseTireConfig {
    fn default() -> Self {
        Self {
            epsilon_ratio: 0.02,
            tolerance: 1e-6,
            max_iter: 25,
            delta_max: 35f64.to_radians(),
        }
    }
}

impl InverseTireConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.epsilon_ratio > 0.0 && self.epsilon_ratio.is_finite()) {
            return Err(Error::InvalidParameter("epsilon must be positive"));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::InvalidParameter("Newton tolerance must be positive"));
        }
        if !(self.delta_max > 0.0 && self.delta_max < PI / 2.0) {
            return Err(Error::InvalidParameter("steering limit must lie in (0, pi/2)"));
        }
        Ok(())
    }
}

/// Steering angles and axle torques for the plant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActuatorCommand {
    pub delta_front: f64,
    pub delta_rear: f64,
    pub torque_front: f64,
    pub torque_rear: f64,
}

impl ActuatorCommand {
    pub fn steering(&self) -> SteeringAngles {
        SteeringAngles {
            front: self.delta_front,
            rear: self.delta_rear,
        }
    }

    pub fn torques(&self) -> AxleTorques {
        AxleTorques {
            front: self.torque_front,
            rear: self.torque_rear,
        }
    }
}

/// Rotates body-frame axle forces into the frame of a wheel steered by
/// `delta`.
pub fn body_to_tire_forces(fx_body: f64, fy_body: f64, delta: f64) -> (f64, f64) {
    let (s, c) = (sin(delta), cos(delta));
    (fx_body * c + fy_body * s, -fx_body * s + fy_body * c)
}

/// Slip angles that produce a given lateral force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseSlip {
    /// Smallest-magnitude solution, on the stiff side of the curve.
    pub principal: f64,
    /// Solution past the force peak; only reported near saturation.
    pub secondary: Option<f64>,
}

/// Inverts the lateral Magic Formula. `epsilon` is the proximity threshold
/// (N) to `±mu F_z` below which the post-peak branch is also returned.
pub fn inverse_lateral(fy: f64, fz: f64, mu: f64, tire: &TireParams, epsilon: f64) -> Result<InverseSlip, Error> {
    let limit = mu * fz;
    if fy.abs() > limit {
        return Err(Error::ForceExceedsFriction { force: fy, limit });
    }
    let g = asin(fy / limit);
    let principal = tan(g / tire.shape) / tire.stiffness;
    let secondary = if limit - fy.abs() < epsilon {
        let side = if fy >= 0.0 { 1.0 } else { -1.0 };
        Some(tan((side * PI - g) / tire.shape) / tire.stiffness)
    } else {
        None
    };
    Ok(InverseSlip { principal, secondary })
}

/// Derivative of the principal inverse branch with respect to force, or
/// `None` where it is singular.
fn inverse_lateral_slope(fy: f64, limit: f64, tire: &TireParams) -> Option<f64> {
    let ratio = fy / limit;
    let root = sqrt(1.0 - ratio * ratio);
    if root < 1e-9 {
        return None;
    }
    let c = cos(asin(ratio) / tire.shape);
    Some(1.0 / (tire.stiffness * tire.shape * c * c * root * limit))
}

/// Evaluation of the steering residual at one angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualEval {
    /// `L(delta)` (rad).
    pub value: f64,
    /// `dL/d delta`.
    pub slope: f64,
    /// Whether the tire-frame lateral force was clamped to `±mu F_z`.
    pub clamped: bool,
    /// Whether the analytic slope was singular and a central difference was
    /// used instead.
    pub numeric_slope: bool,
    pub secondary: Option<f64>,
}

/// Everything the residual needs about one axle at the current state.
#[derive(Debug, Clone, Copy)]
struct AxleProblem {
    fx_body: f64,
    fy_body: f64,
    kinematic_angle: f64,
    limit: f64,
    epsilon: f64,
    tire: TireParams,
}

impl AxleProblem {
    fn new(
        fx_body: f64,
        fy_body: f64,
        state: &VehicleState,
        axle: Axle,
        params: &VehicleParams,
        tire: &TireParams,
        cfg: &InverseTireConfig,
    ) -> Result<Self, Error> {
        if !state.v.is_finite() || state.v <= 0.0 {
            return Err(Error::NonPositiveSpeed { v: state.v });
        }
        let loads = static_axle_loads(params);
        let (lever, fz) = match axle {
            Axle::Front => (params.cg_to_front, loads.front),
            Axle::Rear => (-params.cg_to_rear, loads.rear),
        };
        let limit = params.mu * fz;
        Ok(Self {
            fx_body,
            fy_body,
            kinematic_angle: axle_velocity_angle(state, lever),
            limit,
            epsilon: cfg.epsilon_ratio * limit,
            tire: *tire,
        })
    }

    fn lateral(&self, delta: f64) -> (f64, bool) {
        let fy = -self.fx_body * sin(delta) + self.fy_body * cos(delta);
        if fy.abs() > self.limit {
            (fy.clamp(-self.limit, self.limit), true)
        } else {
            (fy, false)
        }
    }

    fn value(&self, delta: f64) -> (f64, bool, Option<f64>) {
        let (fy, clamped) = self.lateral(delta);
        // fy is within the limit by construction
        let slip = inverse_lateral(fy, self.limit, 1.0, &self.tire, self.epsilon).unwrap_or(InverseSlip {
            principal: 0.0,
            secondary: None,
        });
        (slip.principal - self.kinematic_angle + delta, clamped, slip.secondary)
    }

    fn eval(&self, delta: f64) -> ResidualEval {
        let (value, clamped, secondary) = self.value(delta);
        let (slope, numeric_slope) = if clamped {
            // The clamped force no longer depends on delta.
            (1.0, false)
        } else {
            let (fy, _) = self.lateral(delta);
            let dfy = -self.fx_body * cos(delta) - self.fy_body * sin(delta);
            match inverse_lateral_slope(fy, self.limit, &self.tire) {
                Some(k) => (k * dfy + 1.0, false),
                None => {
                    let h = 1e-6;
                    ((self.value(delta + h).0 - self.value(delta - h).0) / (2.0 * h), true)
                }
            }
        };
        ResidualEval {
            value,
            slope,
            clamped,
            numeric_slope,
            secondary,
        }
    }
}

/// Steering residual `L(delta)` for one axle and its slope.
#[allow(clippy::too_many_arguments)]
pub fn steering_residual(
    delta: f64,
    fx_body: f64,
    fy_body: f64,
    state: &VehicleState,
    axle: Axle,
    params: &VehicleParams,
    tire: &TireParams,
    cfg: &InverseTireConfig,
) -> Result<ResidualEval, Error> {
    Ok(AxleProblem::new(fx_body, fy_body, state, axle, params, tire, cfg)?.eval(delta))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SteeringSolution {
    pub delta: f64,
    pub iterations: usize,
    /// Step criterion met with a vanishing residual.
    pub converged: bool,
    /// Final `|L(delta)|` (rad).
    pub residual: f64,
    /// The returned angle sits on `±delta_max`.
    pub saturated: bool,
    /// The lateral force had to be clamped at the returned angle.
    pub clamped: bool,
    /// Post-peak slip solution at the returned angle, if near saturation.
    pub secondary: Option<f64>,
}

/// Newton-Raphson steering solve for one axle, starting at `delta = 0`.
///
/// Non-convergence is not an error: the last iterate is returned with
/// `converged = false`.
#[allow(clippy::too_many_arguments)]
pub fn solve_steering(
    fx_body: f64,
    fy_body: f64,
    state: &VehicleState,
    axle: Axle,
    cfg: &InverseTireConfig,
    params: &VehicleParams,
    tire: &TireParams,
) -> Result<SteeringSolution, Error> {
    let problem = AxleProblem::new(fx_body, fy_body, state, axle, params, tire, cfg)?;
    let dmax = cfg.delta_max;
    let mut delta = 0.0;
    let mut next = 0.0;
    let mut step_met = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let eval = problem.eval(delta);
        iterations += 1;
        let step = if eval.slope != 0.0 && eval.slope.is_finite() {
            eval.value / eval.slope
        } else {
            eval.value
        };
        next = (delta - step).clamp(-dmax, dmax);
        if (next - delta).abs() < cfg.tolerance {
            step_met = true;
            break;
        }
        delta = next;
    }
    let last = problem.eval(next);
    let residual = last.value.abs();
    Ok(SteeringSolution {
        delta: next,
        iterations,
        converged: step_met && residual <= cfg.tolerance,
        residual,
        saturated: next.abs() >= dmax,
        clamped: last.clamped,
        secondary: last.secondary,
    })
}

/// Axle torque that produces the commanded force along the wheel heading.
pub fn axle_torque(fx_body: f64, fy_body: f64, delta: f64, wheel_radius: f64) -> f64 {
    (fx_body * cos(delta) + fy_body * sin(delta)) * wheel_radius
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActuatorDiagnostics {
    pub front: SteeringSolution,
    pub rear: SteeringSolution,
}

impl ActuatorDiagnostics {
    pub fn all_converged(&self) -> bool {
        self.front.converged && self.rear.converged
    }
}

/// Lower-layer allocation for both axles.
pub fn regulate(
    u: &AxleForceCommand,
    state: &VehicleState,
    cfg: &InverseTireConfig,
    params: &VehicleParams,
    tire: &TireParams,
) -> Result<(ActuatorCommand, ActuatorDiagnostics), Error> {
    let front = solve_steering(u.fx_front, u.fy_front, state, Axle::Front, cfg, params, tire)?;
    let rear = solve_steering(u.fx_rear, u.fy_rear, state, Axle::Rear, cfg, params, tire)?;
    let r = params.wheel_radius;
    let cmd = ActuatorCommand {
        delta_front: front.delta,
        delta_rear: rear.delta,
        torque_front: axle_torque(u.fx_front, u.fy_front, front.delta, r),
        torque_rear: axle_torque(u.fx_rear, u.fy_rear, rear.delta, r),
    };
    Ok((cmd, ActuatorDiagnostics { front, rear }))
}
