//! Reference paths, path-relative tracking errors and the linearized error
//! model used by the MPC.
//!
//! Curvature is signed with the yaw-rate reference law in mind: a path with
//! positive curvature bends clockwise (to the right), so its heading
//! decreases with arc length and the feed-forward yaw rate `-kappa v_r` is
//! negative. A counterclockwise circle of radius `R` has curvature `-1/R`.
//!
//! The lateral error `e_d` is positive when the vehicle is left of the path
//! tangent.

use crate::vehicle::{VehicleParams, VehicleState};
use crate::{wrap_angle, Error};
use alloc::vec::Vec;
use libm::{cos, sin};
use nalgebra::{Matrix4, Vector4};

/// Half-width of the arc-length window searched by [`project`].
pub const PROJECTION_WINDOW: f64 = 20.0;
const PROJECTION_SCAN_STEP: f64 = 0.25;
const KNOT_SPACING: f64 = 1.0;

/// Curvature as a function of arc length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CurvatureProfile {
    Constant(f64),
    /// Curvature varies linearly from `start` to `end` over `length` metres
    /// and holds `end` afterwards.
    Linear {
        start: f64,
        end: f64,
        length: f64,
    },
}

impl CurvatureProfile {
    pub fn curvature(&self, s: f64) -> f64 {
        match *self {
            CurvatureProfile::Constant(k) => k,
            CurvatureProfile::Linear { start, end, length } => {
                if s >= length {
                    end
                } else {
                    start + (end - start) * s / length
                }
            }
        }
    }

    /// `int_0^s kappa(t) dt`
    fn integral(&self, s: f64) -> f64 {
        match *self {
            CurvatureProfile::Constant(k) => k * s,
            CurvatureProfile::Linear { start, end, length } => {
                let ramp = s.min(length);
                let on_ramp = start * ramp + 0.5 * (end - start) * ramp * ramp / length;
                on_ramp + end * (s - ramp)
            }
        }
    }

    /// Arc length where the curvature stops being smooth, if any.
    fn breakpoint(&self) -> Option<f64> {
        match *self {
            CurvatureProfile::Constant(_) => None,
            CurvatureProfile::Linear { length, .. } => Some(length),
        }
    }

    fn max_abs_curvature(&self) -> f64 {
        match *self {
            CurvatureProfile::Constant(k) => k.abs(),
            CurvatureProfile::Linear { start, end, .. } => start.abs().max(end.abs()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint {
    /// Arc length (m).
    pub s: f64,
    pub x: f64,
    pub y: f64,
    /// Path heading (rad).
    pub heading: f64,
    /// Signed curvature, positive clockwise (1/m).
    pub curvature: f64,
    /// Reference speed (m/s).
    pub speed: f64,
}

impl ReferencePoint {
    /// Unit normal pointing to the left of the tangent.
    fn left_normal(&self) -> (f64, f64) {
        (-sin(self.heading), cos(self.heading))
    }
}

#[derive(Debug, Clone, Copy)]
struct Knot {
    x: f64,
    y: f64,
}

/// A planar reference path parametrized by arc length, starting at an anchor
/// pose.
#[derive(Debug, Clone)]
pub struct ReferencePath {
    profile: CurvatureProfile,
    speed: f64,
    length: f64,
    origin: (f64, f64),
    initial_heading: f64,
    knots: Vec<Knot>,
}

// 6-point Gauss-Legendre rule on [-1, 1].
const GL_NODES: [f64; 6] = [
    -0.932_469_514_203_152,
    -0.661_209_386_466_264_5,
    -0.238_619_186_083_196_9,
    0.238_619_186_083_196_9,
    0.661_209_386_466_264_5,
    0.932_469_514_203_152,
];
const GL_WEIGHTS: [f64; 6] = [
    0.171_324_492_379_170_4,
    0.360_761_573_048_138_6,
    0.467_913_934_572_691,
    0.467_913_934_572_691,
    0.360_761_573_048_138_6,
    0.171_324_492_379_170_4,
];

impl ReferencePath {
    /// Builds a path of total `length` metres. The path starts at `origin`
    /// with heading `initial_heading` and is tracked at constant `speed`.
    pub fn new(
        profile: CurvatureProfile,
        speed: f64,
        length: f64,
        origin: (f64, f64),
        initial_heading: f64,
    ) -> Result<Self, Error> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidParameter("path length must be positive"));
        }
        if !(speed.is_finite() && speed > 0.0) {
            return Err(Error::InvalidParameter("reference speed must be positive"));
        }
        if let CurvatureProfile::Linear { length: ramp, .. } = profile {
            if !(ramp.is_finite() && ramp > 0.0) {
                return Err(Error::InvalidParameter("curvature ramp length must be positive"));
            }
        }
        if !profile.max_abs_curvature().is_finite() {
            return Err(Error::InvalidParameter("curvature must be finite"));
        }
        let mut path = Self {
            profile,
            speed,
            length,
            origin,
            initial_heading,
            knots: Vec::new(),
        };
        let count = libm::ceil(length / KNOT_SPACING) as usize + 1;
        let mut knots = Vec::with_capacity(count);
        let mut current = Knot {
            x: origin.0,
            y: origin.1,
        };
        knots.push(current);
        for k in 1..count {
            let s0 = (k - 1) as f64 * KNOT_SPACING;
            let s1 = k as f64 * KNOT_SPACING;
            let (dx, dy) = path.chord(s0, s1);
            current = Knot {
                x: current.x + dx,
                y: current.y + dy,
            };
            knots.push(current);
        }
        path.knots = knots;
        Ok(path)
    }

    /// A circle of `radius` starting at the origin heading along +x.
    /// Counterclockwise circles get negative curvature.
    pub fn circle(radius: f64, counterclockwise: bool, speed: f64, length: f64) -> Result<Self, Error> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidParameter("circle radius must be positive"));
        }
        let k = if counterclockwise { -1.0 / radius } else { 1.0 / radius };
        Self::new(CurvatureProfile::Constant(k), speed, length, (0.0, 0.0), 0.0)
    }

    pub fn profile(&self) -> CurvatureProfile {
        self.profile
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    pub fn initial_heading(&self) -> f64 {
        self.initial_heading
    }

    pub fn speed_at(&self, _s: f64) -> f64 {
        self.speed
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        self.profile.curvature(s)
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        self.initial_heading - self.profile.integral(s)
    }

    /// `int_{s0}^{s1} (cos h, sin h) ds`, split at the curvature breakpoint.
    fn chord(&self, s0: f64, s1: f64) -> (f64, f64) {
        if let Some(b) = self.profile.breakpoint() {
            if s0 < b && b < s1 {
                let (ax, ay) = self.chord(s0, b);
                let (bx, by) = self.chord(b, s1);
                return (ax + bx, ay + by);
            }
        }
        let half = 0.5 * (s1 - s0);
        let mid = 0.5 * (s1 + s0);
        let (mut dx, mut dy) = (0.0, 0.0);
        for (node, weight) in GL_NODES.iter().zip(GL_WEIGHTS.iter()) {
            let h = self.heading_at(mid + half * node);
            dx += weight * cos(h);
            dy += weight * sin(h);
        }
        (dx * half, dy * half)
    }

    pub fn position_at(&self, s: f64) -> (f64, f64) {
        let s = s.clamp(0.0, self.length);
        let k = ((s / KNOT_SPACING) as usize).min(self.knots.len() - 1);
        let knot = self.knots[k];
        let (dx, dy) = self.chord(k as f64 * KNOT_SPACING, s);
        (knot.x + dx, knot.y + dy)
    }

    pub fn point_at(&self, s: f64) -> ReferencePoint {
        let s = s.clamp(0.0, self.length);
        let (x, y) = self.position_at(s);
        ReferencePoint {
            s,
            x,
            y,
            heading: self.heading_at(s),
            curvature: self.curvature_at(s),
            speed: self.speed_at(s),
        }
    }
}

/// Finds the path point closest to the vehicle, searching `±20 m` of
/// arc length around `s_hint`.
///
/// A coarse scan locates the bracket, a 3-point parabola refines it, and a
/// few Newton steps on the orthogonality condition polish the result.
pub fn project(state: &VehicleState, path: &ReferencePath, s_hint: f64) -> Result<ReferencePoint, Error> {
    if !s_hint.is_finite() || s_hint < -PROJECTION_WINDOW || s_hint > path.length() + PROJECTION_WINDOW {
        return Err(Error::ProjectionFailed { s_hint });
    }
    let lo = (s_hint - PROJECTION_WINDOW).max(0.0);
    let hi = (s_hint + PROJECTION_WINDOW).min(path.length());
    let dist2 = |s: f64| {
        let (x, y) = path.position_at(s);
        (state.x - x) * (state.x - x) + (state.y - y) * (state.y - y)
    };

    let samples = libm::ceil((hi - lo) / PROJECTION_SCAN_STEP) as usize;
    let step = (hi - lo) / samples.max(1) as f64;
    let mut best = (0usize, f64::INFINITY);
    for i in 0..=samples {
        let d = dist2(lo + i as f64 * step);
        if d < best.1 {
            best = (i, d);
        }
    }
    let (i, _) = best;
    let at_lo = i == 0;
    let at_hi = i == samples;
    if (at_lo && lo > 0.0) || (at_hi && hi < path.length()) {
        return Err(Error::ProjectionFailed { s_hint });
    }

    let mut s = lo + i as f64 * step;
    if !at_lo && !at_hi {
        let (d0, d1, d2) = (dist2(s - step), dist2(s), dist2(s + step));
        let curvature = d0 - 2.0 * d1 + d2;
        if curvature > 0.0 {
            s += 0.5 * step * (d0 - d2) / curvature;
        }
    }
    let (bracket_lo, bracket_hi) = ((s - step).max(0.0), (s + step).min(path.length()));
    for _ in 0..20 {
        let p = path.point_at(s);
        let (tx, ty) = (cos(p.heading), sin(p.heading));
        let (nx, ny) = p.left_normal();
        let (rx, ry) = (state.x - p.x, state.y - p.y);
        let g = rx * tx + ry * ty;
        let lateral = rx * nx + ry * ny;
        let dg = -1.0 - p.curvature * lateral;
        if dg >= 0.0 {
            break;
        }
        let next = (s - g / dg).clamp(bracket_lo, bracket_hi);
        let done = (next - s).abs() < 1e-12;
        s = next;
        if done {
            break;
        }
    }
    let p = path.point_at(s);
    let along = (state.x - p.x) * cos(p.heading) + (state.y - p.y) * sin(p.heading);
    // A vehicle before the start or past the end has no orthogonal foot point.
    if (s <= 0.0 && along < -1e-6) || (s >= path.length() && along > 1e-6) {
        return Err(Error::ProjectionFailed { s_hint });
    }
    Ok(p)
}

/// The error state `(e_d, e_phi, e_v, e_omega)` of the tracking model.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrackingError {
    pub lateral: f64,
    pub heading: f64,
    pub speed: f64,
    pub yaw_rate: f64,
}

impl TrackingError {
    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.lateral, self.heading, self.speed, self.yaw_rate)
    }

    pub fn from_vector(x: &Vector4<f64>) -> Self {
        Self {
            lateral: x[0],
            heading: x[1],
            speed: x[2],
            yaw_rate: x[3],
        }
    }
}

/// Signed lateral offset of the vehicle from the reference point.
pub fn lateral_error(state: &VehicleState, reference: &ReferencePoint) -> f64 {
    let (nx, ny) = reference.left_normal();
    (state.x - reference.x) * nx + (state.y - reference.y) * ny
}

/// Tracking errors against a projected reference point and yaw-rate target.
pub fn tracking_errors(state: &VehicleState, reference: &ReferencePoint, omega_des: f64) -> TrackingError {
    TrackingError {
        lateral: lateral_error(state, reference),
        heading: wrap_angle(state.phi - reference.heading + state.beta),
        speed: state.v - reference.speed,
        yaw_rate: state.omega - omega_des,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YawRateGains {
    pub lateral: f64,
    pub heading: f64,
}

impl Default for YawRateGains {
    fn default() -> Self {
        Self {
            lateral: 0.15,
            heading: 0.1,
        }
    }
}

/// Yaw-rate reference
/// `omega_r = -kappa v_r cos(e_phi) / (1 - e_d kappa) - k1 e_d - k2 e_phi`.
///
/// The feed-forward term grows as the vehicle drifts to the outside of the
/// curve, so the reference yaw rate pulls harder the further off the path the
/// vehicle is.
pub fn desired_yaw_rate(
    lateral: f64,
    heading: f64,
    reference: &ReferencePoint,
    gains: &YawRateGains,
) -> Result<f64, Error> {
    let kappa = reference.curvature;
    let denom = 1.0 - lateral * kappa;
    if denom.abs() < 1e-6 {
        return Err(Error::DegenerateCurvature {
            lateral_error: lateral,
            curvature: kappa,
        });
    }
    Ok(-kappa * reference.speed * cos(heading) / denom - gains.lateral * lateral - gains.heading * heading)
}

/// Which state matrix row for `e_phi` the error model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadingCoupling {
    /// `e_omega` does not enter `d e_phi / dt`.
    #[default]
    Literal,
    /// Adds a unit `e_omega -> d e_phi / dt` entry.
    YawRate,
}

/// Discrete error model `x_{k+1} = A_d x_k + B_d u_k` and its continuous
/// Jacobians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearModel {
    pub a_d: Matrix4<f64>,
    pub b_d: Matrix4<f64>,
    pub a_c: Matrix4<f64>,
    pub b_c: Matrix4<f64>,
    pub sample_time: f64,
}

/// Linearizes the tracking model at the reference point for the current
/// sideslip and speed, then discretizes with forward Euler.
pub fn linearize(
    reference: &ReferencePoint,
    beta: f64,
    v: f64,
    params: &VehicleParams,
    sample_time: f64,
    coupling: HeadingCoupling,
) -> Result<LinearModel, Error> {
    if !v.is_finite() || v <= 0.0 {
        return Err(Error::NonPositiveSpeed { v });
    }
    if !(sample_time.is_finite() && sample_time > 0.0) {
        return Err(Error::InvalidParameter("sample time must be positive"));
    }
    let kappa = reference.curvature;
    let vr = reference.speed;
    let mut a_c = Matrix4::zeros();
    a_c[(0, 1)] = vr;
    a_c[(1, 0)] = kappa * kappa * vr;
    a_c[(1, 2)] = -kappa;
    if coupling == HeadingCoupling::YawRate {
        a_c[(1, 3)] = 1.0;
    }

    let (sb, cb) = (sin(beta), cos(beta));
    let m = params.mass;
    let mv = m * v;
    let iz = params.yaw_inertia;
    #[rustfmt::skip]
    let b_c = Matrix4::new(
        0.0,       0.0,       0.0,                    0.0,
        -sb / mv,  -sb / mv,  cb / mv,                cb / mv,
        cb / m,    cb / m,    sb / m,                 sb / m,
        0.0,       0.0,       params.cg_to_front / iz, -params.cg_to_rear / iz,
    );
    Ok(LinearModel {
        a_d: Matrix4::identity() + a_c * sample_time,
        b_d: b_c * sample_time,
        a_c,
        b_c,
        sample_time,
    })
}
