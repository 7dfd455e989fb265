//! Hierarchical drift control for four-wheel-drive, four-wheel-steering
//! vehicles.
//!
//! The crate is split along the control hierarchy:
//!
//! * [`vehicle`]: the nonlinear single-track plant with Magic Formula tires,
//!   integrated with fixed-step RK4.
//! * [`trajectory`]: reference paths, projection, tracking errors, the yaw
//!   rate reference law and the linearized error model.
//! * [`qp`]: a dense Goldfarb-Idnani active-set QP solver.
//! * [`mpc`]: the incremental MPC upper layer with friction-octagon
//!   constraints and filtered input-disturbance compensation.
//! * [`actuator`]: the lower layer, inverting the tire model with
//!   Newton-Raphson to get steering angles and axle torques.
//! * [`sim`] and [`analysis`]: the closed-loop runner and run metrics.
//!
//! Everything here is `no_std` with `alloc`; file formats and the CLI live in
//! the `drift-sim` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod actuator;
pub mod analysis;
mod error;
pub mod mpc;
pub mod qp;
pub mod sim;
pub mod trajectory;
pub mod vehicle;

pub use error::Error;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    use core::f64::consts::{PI, TAU};
    let mut a = libm::fmod(angle + PI, TAU);
    if a < 0.0 {
        a += TAU;
    }
    let wrapped = a - PI;
    if wrapped == -PI {
        PI
    } else {
        wrapped
    }
}
