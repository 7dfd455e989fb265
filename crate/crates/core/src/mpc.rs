//! Upper-layer incremental MPC.
//!
//! The error model `x_{k+1} = A_d x_k + B_d u_k` is augmented with the
//! previous input so that the decision variables are force increments
//! `dU = (du_0, ..., du_{Nc-1})`. Over `Np` steps the predicted errors are
//!
//! ```text
//! Y = Psi xbar + Theta dU + D_corr
//! ```
//!
//! where `D_corr` propagates a filtered estimate of the model mismatch
//! through the augmented dynamics with geometric attenuation. Increments are
//! box-bounded by the force rate limits and the absolute axle forces are kept
//! inside an octagon inscribed in each axle's friction circle.

use crate::qp::{QpProblem, QpSettings, QpSolver, QpStatus};
use crate::trajectory::{
    desired_yaw_rate, lateral_error, linearize, project, tracking_errors, HeadingCoupling, LinearModel, ReferencePath,
    ReferencePoint, TrackingError, YawRateGains,
};
use crate::vehicle::{static_axle_loads, AxleForceCommand, AxleLoads, VehicleParams, VehicleState};
use crate::{wrap_angle, Error};
use alloc::vec::Vec;
use core::f64::consts::PI;
use libm::{cos, exp, pow, sin};
use nalgebra::{DMatrix, DVector, Matrix4, SMatrix, Vector4};

pub type Matrix8 = SMatrix<f64, 8, 8>;
pub type Matrix8x4 = SMatrix<f64, 8, 4>;
pub type Matrix4x8 = SMatrix<f64, 4, 8>;
pub type Vector8 = SMatrix<f64, 8, 1>;

/// Number of half-planes per axle in the friction polytope.
pub const OCTAGON_SIDES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub prediction_horizon: usize,
    pub control_horizon: usize,
    /// Weight on `(e_d, e_phi, e_v, e_omega)`.
    pub q: Matrix4<f64>,
    /// Weight on `(dF_Xf, dF_Xr, dF_Yf, dF_Yr)`.
    pub r: Matrix4<f64>,
    pub sample_time: f64,
    /// Per-step attenuation of the propagated disturbance.
    pub gamma: f64,
    /// Longitudinal force rate limit (N/s).
    pub fx_rate_limit: f64,
    /// Lateral force rate limit (N/s).
    pub fy_rate_limit: f64,
    pub compensation_enabled: bool,
    /// Disturbance low-pass cutoff (Hz).
    pub filter_cutoff: f64,
    pub coupling: HeadingCoupling,
    pub yaw_gains: YawRateGains,
    pub qp: QpSettings,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            prediction_horizon: 30,
            control_horizon: 8,
            q: Matrix4::from_diagonal(&Vector4::new(2900.0, 2000.0, 1000.0, 7500.0)),
            r: Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 0.01, 0.01)),
            sample_time: 0.05,
            gamma: 0.98,
            fx_rate_limit: 1500.0,
            fy_rate_limit: 14000.0,
            compensation_enabled: true,
            filter_cutoff: 1.0,
            coupling: HeadingCoupling::Literal,
            yaw_gains: YawRateGains::default(),
            qp: QpSettings::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.control_horizon == 0 || self.control_horizon > self.prediction_horizon {
            return Err(Error::InvalidParameter("horizons must satisfy 1 <= Nc <= Np"));
        }
        if !(self.sample_time.is_finite() && self.sample_time > 0.0) {
            return Err(Error::InvalidParameter("sample time must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidParameter("gamma must lie in (0, 1]"));
        }
        if !(self.fx_rate_limit > 0.0 && self.fy_rate_limit > 0.0) {
            return Err(Error::InvalidParameter("force rate limits must be positive"));
        }
        if !(self.filter_cutoff.is_finite() && self.filter_cutoff > 0.0) {
            return Err(Error::InvalidParameter("filter cutoff must be positive"));
        }
        if self.yaw_gains.lateral < 0.0 || self.yaw_gains.heading < 0.0 {
            return Err(Error::InvalidParameter("yaw-rate gains must be non-negative"));
        }
        if !(self.qp.tol.is_finite() && self.qp.tol > 0.0) || self.qp.max_iter == 0 {
            return Err(Error::InvalidParameter(
                "QP tolerance and iteration budget must be positive",
            ));
        }
        if !is_symmetric_psd(&self.q) {
            return Err(Error::InvalidParameter("Q must be symmetric positive semi-definite"));
        }
        if !is_symmetric_psd(&self.r) || self.r.cholesky().is_none() {
            return Err(Error::InvalidParameter("R must be symmetric positive definite"));
        }
        Ok(())
    }

    /// Per-step increment bounds `(|dF_X|, |dF_Y|)`.
    pub fn increment_limits(&self) -> (f64, f64) {
        (
            self.fx_rate_limit * self.sample_time,
            self.fy_rate_limit * self.sample_time,
        )
    }

    /// Discrete low-pass coefficient `1 - exp(-2 pi f_c T)`.
    pub fn filter_coefficient(&self) -> f64 {
        1.0 - exp(-2.0 * PI * self.filter_cutoff * self.sample_time)
    }
}

fn is_symmetric_psd(m: &Matrix4<f64>) -> bool {
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) || m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    m.symmetric_eigenvalues()
        .iter()
        .all(|&l| l >= -1e-12 * m.amax().max(1.0))
}

/// Model with the previous input appended to the state: `xbar = (x, u_prev)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedModel {
    pub a_bar: Matrix8,
    pub b_bar: Matrix8x4,
    pub c_out: Matrix4x8,
}

pub fn augment(model: &LinearModel) -> AugmentedModel {
    let mut a_bar = Matrix8::zeros();
    a_bar.fixed_view_mut::<4, 4>(0, 0).copy_from(&model.a_d);
    a_bar.fixed_view_mut::<4, 4>(0, 4).copy_from(&model.b_d);
    a_bar.fixed_view_mut::<4, 4>(4, 4).copy_from(&Matrix4::identity());
    let mut b_bar = Matrix8x4::zeros();
    b_bar.fixed_view_mut::<4, 4>(0, 0).copy_from(&model.b_d);
    b_bar.fixed_view_mut::<4, 4>(4, 0).copy_from(&Matrix4::identity());
    let mut c_out = Matrix4x8::zeros();
    c_out.fixed_view_mut::<4, 4>(0, 0).copy_from(&Matrix4::identity());
    AugmentedModel { a_bar, b_bar, c_out }
}

pub fn augmented_state(x: &Vector4<f64>, u_prev: &Vector4<f64>) -> Vector8 {
    let mut xbar = Vector8::zeros();
    xbar.fixed_rows_mut::<4>(0).copy_from(x);
    xbar.fixed_rows_mut::<4>(4).copy_from(u_prev);
    xbar
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrices {
    /// `(4 Np) x 8`; block row `i` is `C A_bar^(i+1)`.
    pub psi: DMatrix<f64>,
    /// `(4 Np) x (4 Nc)`; block `(i, j)` is `C A_bar^(i-j) B_bar` for `j <= i`.
    pub theta: DMatrix<f64>,
    pub prediction_horizon: usize,
    pub control_horizon: usize,
}

pub fn build_prediction(aug: &AugmentedModel, np: usize, nc: usize) -> Result<PredictionMatrices, Error> {
    if nc == 0 || nc > np {
        return Err(Error::InvalidParameter("horizons must satisfy 1 <= Nc <= Np"));
    }
    let mut psi = DMatrix::zeros(4 * np, 8);
    let mut theta = DMatrix::zeros(4 * np, 4 * nc);
    // markov[k] = C A_bar^k B_bar
    let mut markov: Vec<SMatrix<f64, 4, 4>> = Vec::with_capacity(np);
    let mut power = Matrix8::identity();
    for i in 0..np {
        markov.push(aug.c_out * power * aug.b_bar);
        power = aug.a_bar * power;
        psi.view_mut((4 * i, 0), (4, 8)).copy_from(&(aug.c_out * power));
    }
    for i in 0..np {
        for j in 0..nc.min(i + 1) {
            theta.view_mut((4 * i, 4 * j), (4, 4)).copy_from(&markov[i - j]);
        }
    }
    Ok(PredictionMatrices {
        psi,
        theta,
        prediction_horizon: np,
        control_horizon: nc,
    })
}

/// Outward normal of octagon side `j`.
fn octagon_normal(j: usize) -> (f64, f64) {
    let theta = j as f64 * PI / 4.0;
    (cos(theta), sin(theta))
}

/// Slack of each octagon half-plane for one axle force. All slacks are
/// non-negative exactly when the force lies in the octagon inscribed in the
/// circle of radius `limit`.
pub fn octagon_slacks(fx: f64, fy: f64, limit: f64) -> [f64; OCTAGON_SIDES] {
    let offset = limit * cos(PI / 8.0);
    let mut out = [0.0; OCTAGON_SIDES];
    for (j, slot) in out.iter_mut().enumerate() {
        let (c, s) = octagon_normal(j);
        *slot = offset - (c * fx + s * fy);
    }
    out
}

/// Friction polytopes on the absolute axle forces `u_prev + du_0 + ... + du_i`
/// at every predicted step, as rows `A dU <= b`.
///
/// Increments are frozen after the control horizon, so the absolute forces
/// at steps `Nc..Np` equal those at step `Nc` and only `Nc` distinct row
/// groups are emitted. Each group holds the 8 front rows, then the 8 rear
/// rows.
pub fn octagon_constraints(
    mu: f64,
    loads: &AxleLoads,
    u_prev: &AxleForceCommand,
    nc: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = 4 * nc;
    let rows = 2 * OCTAGON_SIDES * nc;
    let mut a = DMatrix::zeros(rows, n);
    let mut b = DVector::zeros(rows);
    // (fx index, fy index, load, previous force)
    let axles = [
        (0usize, 2usize, loads.front, (u_prev.fx_front, u_prev.fy_front)),
        (1, 3, loads.rear, (u_prev.fx_rear, u_prev.fy_rear)),
    ];
    let mut row = 0;
    for step in 0..nc {
        for &(ix, iy, fz, (px, py)) in &axles {
            let slacks = octagon_slacks(px, py, mu * fz);
            for (j, slack) in slacks.iter().enumerate() {
                let (c, s) = octagon_normal(j);
                for k in 0..=step {
                    a[(row, 4 * k + ix)] = c;
                    a[(row, 4 * k + iy)] = s;
                }
                b[row] = *slack;
                row += 1;
            }
        }
    }
    (a, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceState {
    /// Latest model mismatch `x_{k+1} - (A_d x_k + B_d u_k)`.
    pub d_raw: Vector4<f64>,
    pub d_filt: Vector4<f64>,
    /// Correction over the prediction horizon; empty until first computed.
    pub d_corr: DVector<f64>,
}

impl Default for DisturbanceState {
    fn default() -> Self {
        Self {
            d_raw: Vector4::zeros(),
            d_filt: Vector4::zeros(),
            d_corr: DVector::zeros(0),
        }
    }
}

/// Updates the mismatch estimate from one measured transition and low-pass
/// filters it. The correction vector is carried over unchanged.
pub fn estimate_disturbance(
    x_measured_next: &Vector4<f64>,
    x_k: &Vector4<f64>,
    u_k: &Vector4<f64>,
    model: &LinearModel,
    prev: &DisturbanceState,
    cfg: &MpcConfig,
) -> DisturbanceState {
    let d_raw = x_measured_next - (model.a_d * x_k + model.b_d * u_k);
    let alpha = cfg.filter_coefficient();
    DisturbanceState {
        d_raw,
        d_filt: prev.d_filt + (d_raw - prev.d_filt) * alpha,
        d_corr: prev.d_corr.clone(),
    }
}

/// Block `i` (1-based) is `gamma^i C sum_{j<i} A_bar^j [d; 0]`: the
/// disturbance enters the error partition of the augmented state.
pub fn correction_vector(d_filt: &Vector4<f64>, aug: &AugmentedModel, np: usize, gamma: f64) -> DVector<f64> {
    let mut out = DVector::zeros(4 * np);
    let mut term = augmented_state(d_filt, &Vector4::zeros());
    let mut sum = Vector8::zeros();
    for i in 0..np {
        sum += term;
        term = aug.a_bar * term;
        let block = aug.c_out * sum * pow(gamma, (i + 1) as f64);
        out.fixed_rows_mut::<4>(4 * i).copy_from(&block);
    }
    out
}

/// Assembles the condensed QP over `dU`.
///
/// `H = 2 (Theta' Qbar Theta + Rbar)`, `f = 2 Theta' Qbar (Psi xbar + D_corr - Y_ref)`.
pub fn build_qp(
    xbar: &Vector8,
    pred: &PredictionMatrices,
    y_ref: &DVector<f64>,
    d_corr: Option<&DVector<f64>>,
    cfg: &MpcConfig,
    constraints: (DMatrix<f64>, DVector<f64>),
) -> Result<QpProblem, Error> {
    let np = pred.prediction_horizon;
    let nc = pred.control_horizon;
    if y_ref.len() != 4 * np || d_corr.is_some_and(|d| d.len() != 4 * np) {
        return Err(Error::Dimension("reference and correction must have 4 Np entries"));
    }
    let n = 4 * nc;
    let mut q_theta = pred.theta.clone();
    for i in 0..np {
        let block = cfg.q * pred.theta.view((4 * i, 0), (4, n));
        q_theta.view_mut((4 * i, 0), (4, n)).copy_from(&block);
    }
    let mut h = pred.theta.transpose() * &q_theta;
    for k in 0..nc {
        let mut view = h.view_mut((4 * k, 4 * k), (4, 4));
        view += cfg.r;
    }
    h *= 2.0;
    let h = (&h + h.transpose()) * 0.5;

    let mut free = &pred.psi * DVector::from_column_slice(xbar.as_slice());
    if let Some(d) = d_corr {
        free += d;
    }
    free -= y_ref;
    let f = q_theta.transpose() * free * 2.0;

    let (dfx, dfy) = cfg.increment_limits();
    let step_bounds = [dfx, dfx, dfy, dfy];
    let upper = DVector::from_fn(n, |i, _| step_bounds[i % 4]);
    let lower = -&upper;
    let (a_ieq, b_ieq) = constraints;
    let p = QpProblem {
        h,
        f,
        a_ieq,
        b_ieq,
        lower,
        upper,
    };
    p.check_dimensions()?;
    Ok(p)
}

/// Per-step controller diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlDiagnostics {
    pub reference: ReferencePoint,
    pub errors: TrackingError,
    pub omega_des: f64,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    pub active_constraints: usize,
    /// The QP result was rejected and the previous command held.
    pub fallback: bool,
    pub increment: AxleForceCommand,
    pub d_filt: Vector4<f64>,
    /// Euclidean norm of the horizon correction.
    pub correction_norm: f64,
    pub regularized: bool,
}

/// Stateful upper-layer controller: owns the disturbance estimate, the
/// previous command, the projection hint and the QP warm start.
#[derive(Debug, Clone)]
pub struct MpcController {
    config: MpcConfig,
    params: VehicleParams,
    loads: AxleLoads,
    solver: QpSolver,
    disturbance: DisturbanceState,
    u_prev: AxleForceCommand,
    s_hint: f64,
    /// Error state, applied command and model from the previous step.
    last: Option<(Vector4<f64>, Vector4<f64>, LinearModel)>,
    keep_problem: bool,
    last_problem: Option<QpProblem>,
}

impl MpcController {
    pub fn new(config: MpcConfig, params: VehicleParams) -> Result<Self, Error> {
        config.validate()?;
        params.validate()?;
        Ok(Self {
            solver: QpSolver::new(config.qp),
            loads: static_axle_loads(&params),
            config,
            params,
            disturbance: DisturbanceState::default(),
            u_prev: AxleForceCommand::default(),
            s_hint: 0.0,
            last: None,
            keep_problem: false,
            last_problem: None,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    pub fn disturbance(&self) -> &DisturbanceState {
        &self.disturbance
    }

    pub fn previous_command(&self) -> AxleForceCommand {
        self.u_prev
    }

    /// Overrides the held command, e.g. to start from a trimmed state.
    pub fn set_previous_command(&mut self, u: AxleForceCommand) {
        self.u_prev = u;
    }

    /// Overrides the filtered disturbance. Only meaningful with
    /// compensation enabled.
    pub fn set_disturbance(&mut self, d_filt: Vector4<f64>) {
        self.disturbance.d_filt = d_filt;
    }

    pub fn set_projection_hint(&mut self, s: f64) {
        self.s_hint = s;
    }

    /// Keep a copy of the QP built by the next control steps.
    pub fn set_keep_problem(&mut self, keep: bool) {
        self.keep_problem = keep;
    }

    pub fn take_last_problem(&mut self) -> Option<QpProblem> {
        self.last_problem.take()
    }

    /// Clears the transition memory so the next step does not update the
    /// disturbance estimate.
    pub fn forget_transition(&mut self) {
        self.last = None;
    }

    /// One control period: project, compute errors and the yaw-rate target,
    /// update the disturbance estimate, linearize, solve the QP and return
    /// `u_prev + du_0`.
    pub fn control_step(
        &mut self,
        state: &VehicleState,
        path: &ReferencePath,
    ) -> Result<(AxleForceCommand, ControlDiagnostics), Error> {
        if !state.v.is_finite() || state.v <= 0.0 {
            return Err(Error::NonPositiveSpeed { v: state.v });
        }
        let cfg = &self.config;
        let reference = project(state, path, self.s_hint)?;
        self.s_hint = reference.s;
        let e_d = lateral_error(state, &reference);
        let e_phi = wrap_angle(state.phi - reference.heading + state.beta);
        let omega_des = desired_yaw_rate(e_d, e_phi, &reference, &cfg.yaw_gains)?;
        let errors = tracking_errors(state, &reference, omega_des);
        let x = errors.to_vector();

        if cfg.compensation_enabled {
            if let Some((x_k, u_k, model_k)) = &self.last {
                self.disturbance = estimate_disturbance(&x, x_k, u_k, model_k, &self.disturbance, cfg);
            }
        }

        let model = linearize(
            &reference,
            state.beta,
            state.v,
            &self.params,
            cfg.sample_time,
            cfg.coupling,
        )?;
        let aug = augment(&model);
        let np = cfg.prediction_horizon;
        let nc = cfg.control_horizon;
        let pred = build_prediction(&aug, np, nc)?;
        let u_prev_vec = Vector4::from(self.u_prev.to_array());
        let xbar = augmented_state(&x, &u_prev_vec);
        let d_corr = if cfg.compensation_enabled {
            self.disturbance.d_corr = correction_vector(&self.disturbance.d_filt, &aug, np, cfg.gamma);
            Some(&self.disturbance.d_corr)
        } else {
            None
        };
        let correction_norm = d_corr.map_or(0.0, |d| d.norm());
        let constraints = octagon_constraints(self.params.mu, &self.loads, &self.u_prev, nc);
        let y_ref = DVector::zeros(4 * np);
        let problem = build_qp(&xbar, &pred, &y_ref, d_corr, cfg, constraints)?;
        let sol = self.solver.solve(&problem)?;
        if self.keep_problem {
            self.last_problem = Some(problem);
        }

        let fallback = sol.status != QpStatus::Optimal;
        let increment = if fallback {
            log::warn!(
                "QP returned {:?} after {} iterations at s = {:.2} m; holding previous command",
                sol.status,
                sol.iterations,
                reference.s
            );
            AxleForceCommand::default()
        } else {
            AxleForceCommand::from_array([sol.x[0], sol.x[1], sol.x[2], sol.x[3]])
        };
        let u = AxleForceCommand::from_array((u_prev_vec + Vector4::from(increment.to_array())).into());
        self.u_prev = u;
        self.last = Some((x, Vector4::from(u.to_array()), model));

        let diagnostics = ControlDiagnostics {
            reference,
            errors,
            omega_des,
            qp_status: sol.status,
            qp_iterations: sol.iterations,
            active_constraints: sol.active.len(),
            fallback,
            increment,
            d_filt: self.disturbance.d_filt,
            correction_norm,
            regularized: sol.regularized,
        };
        Ok((u, diagnostics))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::solve;
    use crate::trajectory::CurvatureProfile;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_model(rng: &mut impl Rng) -> LinearModel {
        let a = Matrix4::from_fn(|_, _| rng.gen_range(-0.3..0.3)) + Matrix4::identity();
        let b = Matrix4::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        LinearModel {
            a_d: a,
            b_d: b,
            a_c: (a - Matrix4::identity()) / 0.05,
            b_c: b / 0.05,
            sample_time: 0.05,
        }
    }

    fn random_vec<const N: usize>(rng: &mut impl Rng) -> SMatrix<f64, N, 1> {
        SMatrix::from_fn(|_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = MpcConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.increment_limits(), (75.0, 700.0));
        let bad = MpcConfig {
            control_horizon: 31,
            ..MpcConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MpcConfig {
            r: Matrix4::zeros(),
            ..MpcConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn identity_model_augments_to_identity() {
        let model = LinearModel {
            a_d: Matrix4::identity(),
            b_d: Matrix4::zeros(),
            a_c: Matrix4::zeros(),
            b_c: Matrix4::zeros(),
            sample_time: 0.05,
        };
        let aug = augment(&model);
        assert_eq!(aug.a_bar, Matrix8::identity());
        let x = Vector4::new(1.0, -2.0, 3.0, -4.0);
        assert_eq!(aug.c_out * augmented_state(&x, &Vector4::new(9.0, 9.0, 9.0, 9.0)), x);
    }

    #[test]
    fn augmented_step_matches_definition() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let model = random_model(&mut rng);
        let aug = augment(&model);
        for _ in 0..100 {
            let x = random_vec::<4>(&mut rng);
            let u = random_vec::<4>(&mut rng);
            let du = random_vec::<4>(&mut rng);
            let next = aug.a_bar * augmented_state(&x, &u) + aug.b_bar * du;
            let expected = model.a_d * x + model.b_d * (u + du);
            assert!((next.fixed_rows::<4>(0) - expected).amax() < 1e-14);
            assert!((next.fixed_rows::<4>(4) - (u + du)).amax() < 1e-15);
        }
    }

    #[test]
    fn single_step_prediction() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        let aug = augment(&random_model(&mut rng));
        let pred = build_prediction(&aug, 1, 1).unwrap();
        assert_eq!(
            pred.psi,
            DMatrix::from_column_slice(4, 8, (aug.c_out * aug.a_bar).as_slice())
        );
        assert_eq!(
            pred.theta,
            DMatrix::from_column_slice(4, 4, (aug.c_out * aug.b_bar).as_slice())
        );
        assert!(build_prediction(&aug, 3, 4).is_err());
        assert!(build_prediction(&aug, 3, 0).is_err());
    }

    fn rollout(aug: &AugmentedModel, xbar: &Vector8, du: &DVector<f64>, np: usize, nc: usize) -> DVector<f64> {
        let mut y = DVector::zeros(4 * np);
        let mut z = *xbar;
        for i in 0..np {
            let step = if i < nc {
                Vector4::new(du[4 * i], du[4 * i + 1], du[4 * i + 2], du[4 * i + 3])
            } else {
                Vector4::zeros()
            };
            z = aug.a_bar * z + aug.b_bar * step;
            y.fixed_rows_mut::<4>(4 * i).copy_from(&(aug.c_out * z));
        }
        y
    }

    #[test]
    fn prediction_matches_rollout() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        for &(np, nc) in &[(5usize, 2usize), (7, 7), (30, 8)] {
            let aug = augment(&random_model(&mut rng));
            let pred = build_prediction(&aug, np, nc).unwrap();
            for _ in 0..20 {
                let xbar = random_vec::<8>(&mut rng);
                let du = DVector::from_fn(4 * nc, |_, _| rng.gen_range(-1.0..1.0));
                let y = &pred.psi * DVector::from_column_slice(xbar.as_slice()) + &pred.theta * &du;
                let expected = rollout(&aug, &xbar, &du, np, nc);
                let scale = expected.amax().max(1.0);
                assert!((y - &expected).amax() <= 1e-10 * scale);
            }
            let xbar = random_vec::<8>(&mut rng);
            let free = rollout(&aug, &xbar, &DVector::zeros(4 * nc), np, nc);
            let y = &pred.psi * DVector::from_column_slice(xbar.as_slice());
            assert!((&y - free).amax() <= 1e-10 * y.amax().max(1.0));
        }
    }

    #[test]
    fn octagon_slack_geometry() {
        let limit = 9000.0;
        let inner = limit * cos(PI / 8.0);
        for s in octagon_slacks(0.0, 0.0, limit) {
            assert_eq!(s, inner);
        }
        // a vertex of the octagon lies at radius `limit` along pi/8
        let (fx, fy) = (limit * cos(PI / 8.0), limit * sin(PI / 8.0));
        let slacks = octagon_slacks(fx, fy, limit);
        let active: Vec<usize> = (0..8).filter(|&j| slacks[j].abs() < 1e-9).collect();
        assert_eq!(active, [0, 1]);
        assert!(slacks.iter().all(|&s| s > -1e-9));
    }

    #[test]
    fn octagon_sampling_containment() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(6);
        let limit = 7000.0;
        let (mut inside, mut inscribed) = (0, 0);
        while inside < 10_000 || inscribed < 10_000 {
            let fx = rng.gen_range(-limit..limit);
            let fy = rng.gen_range(-limit..limit);
            let r = libm::hypot(fx, fy);
            if inside < 10_000 && octagon_slacks(fx, fy, limit).iter().all(|&s| s >= 0.0) {
                assert!(r <= limit);
                inside += 1;
            }
            if inscribed < 10_000 && r <= limit * cos(PI / 8.0) {
                assert!(octagon_slacks(fx, fy, limit).iter().all(|&s| s >= 0.0));
                inscribed += 1;
            }
        }
    }

    #[test]
    fn octagon_rows_track_cumulative_force() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let loads = AxleLoads {
            front: 9000.0,
            rear: 6000.0,
        };
        let u_prev = AxleForceCommand::from_array([300.0, -200.0, 2500.0, 1800.0]);
        let nc = 4;
        let (a, b) = octagon_constraints(0.9, &loads, &u_prev, nc);
        assert_eq!(a.nrows(), 2 * OCTAGON_SIDES * nc);
        let du = DVector::from_fn(4 * nc, |_, _| rng.gen_range(-500.0..500.0));
        let lhs_minus_b = &a * &du - &b;
        let mut absolute = Vector4::from(u_prev.to_array());
        for step in 0..nc {
            absolute += du.fixed_rows::<4>(4 * step);
            let front = octagon_slacks(absolute[0], absolute[2], 0.9 * loads.front);
            let rear = octagon_slacks(absolute[1], absolute[3], 0.9 * loads.rear);
            for j in 0..8 {
                let base = step * 2 * OCTAGON_SIDES;
                assert_relative_eq!(-lhs_minus_b[base + j], front[j], epsilon = 1e-9);
                assert_relative_eq!(-lhs_minus_b[base + 8 + j], rear[j], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn filter_step_response_matches_closed_form() {
        let cfg = MpcConfig::default();
        let model = LinearModel {
            a_d: Matrix4::identity(),
            b_d: Matrix4::zeros(),
            a_c: Matrix4::zeros(),
            b_c: Matrix4::zeros(),
            sample_time: cfg.sample_time,
        };
        let c = Vector4::new(0.2, -0.01, 0.5, 0.03);
        let alpha = cfg.filter_coefficient();
        assert_relative_eq!(alpha, 1.0 - (-0.1 * PI).exp(), max_relative = 1e-15);
        let mut state = DisturbanceState::default();
        let x = Vector4::zeros();
        let tau_steps = (1.0 / (2.0 * PI * cfg.filter_cutoff) / cfg.sample_time).ceil() as i32;
        for k in 1..=5 * tau_steps {
            state = estimate_disturbance(&c, &x, &x, &model, &state, &cfg);
            assert_eq!(state.d_raw, c);
            let closed = c * (1.0 - (1.0 - alpha).powi(k));
            assert!((state.d_filt - closed).amax() < 1e-15);
        }
        assert!((state.d_filt - c).amax() <= 0.01 * c.amax());
        // a linear plant leaves no residual and the estimate decays
        for _ in 0..200 {
            state = estimate_disturbance(&Vector4::zeros(), &x, &x, &model, &state, &cfg);
        }
        assert!(state.d_filt.amax() < 1e-9);
    }

    #[test]
    fn correction_vector_cases() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(8);
        let aug = augment(&random_model(&mut rng));
        assert_eq!(correction_vector(&Vector4::zeros(), &aug, 5, 0.98), DVector::zeros(20));
        let d = Vector4::new(1.0, 2.0, -3.0, 0.5);
        let one = correction_vector(&d, &aug, 1, 0.98);
        assert!((one - DVector::from_column_slice((d * 0.98).as_slice())).amax() < 1e-15);

        let identity = augment(&LinearModel {
            a_d: Matrix4::identity(),
            b_d: Matrix4::zeros(),
            a_c: Matrix4::zeros(),
            b_c: Matrix4::zeros(),
            sample_time: 0.05,
        });
        let three = correction_vector(&d, &identity, 3, 1.0);
        for i in 0..3 {
            assert_eq!(three.fixed_rows::<4>(4 * i).into_owned(), d * (i + 1) as f64);
        }
    }

    fn circle_setup() -> (
        VehicleParams,
        MpcConfig,
        LinearModel,
        AugmentedModel,
        PredictionMatrices,
    ) {
        let params = VehicleParams::default();
        let cfg = MpcConfig::default();
        let path = ReferencePath::circle(30.0, true, 10.0, 500.0).unwrap();
        let model = linearize(&path.point_at(0.0), -0.6, 10.0, &params, cfg.sample_time, cfg.coupling).unwrap();
        let aug = augment(&model);
        let pred = build_prediction(&aug, cfg.prediction_horizon, cfg.control_horizon).unwrap();
        (params, cfg, model, aug, pred)
    }

    fn loose_constraints(n: usize) -> (DMatrix<f64>, DVector<f64>) {
        (DMatrix::zeros(0, n), DVector::zeros(0))
    }

    #[test]
    fn hessian_symmetric_positive_definite() {
        let (_, cfg, _, _, pred) = circle_setup();
        let y_ref = DVector::zeros(4 * cfg.prediction_horizon);
        let xbar = Vector8::from_fn(|i, _| 0.1 * i as f64);
        let p = build_qp(&xbar, &pred, &y_ref, None, &cfg, loose_constraints(32)).unwrap();
        assert!((&p.h - p.h.transpose()).amax() <= 1e-12 * p.h.amax());
        assert!(p.h.clone().cholesky().is_some());
        assert_eq!(p.upper[0], 75.0);
        assert_eq!(p.upper[2], 700.0);
        assert_eq!(p.lower[3], -700.0);
    }

    #[test]
    fn zero_state_gives_zero_gradient() {
        let (_, cfg, _, _, pred) = circle_setup();
        let y_ref = DVector::zeros(4 * cfg.prediction_horizon);
        let p = build_qp(&Vector8::zeros(), &pred, &y_ref, None, &cfg, loose_constraints(32)).unwrap();
        assert_eq!(p.f, DVector::zeros(32));
        let sol = solve(&p, 1e-8, 200).unwrap();
        assert_eq!(sol.x, DVector::zeros(32));
    }

    #[test]
    fn correction_shifts_gradient_exactly() {
        let (_, cfg, _, aug, pred) = circle_setup();
        let np = cfg.prediction_horizon;
        let y_ref = DVector::zeros(4 * np);
        let xbar = Vector8::from_fn(|i, _| {
            if i < 4 {
                0.05 * (i as f64 - 1.5)
            } else {
                200.0 * i as f64
            }
        });
        let d = correction_vector(&Vector4::new(0.01, -0.02, 0.003, 0.015), &aug, np, cfg.gamma);
        let base = build_qp(&xbar, &pred, &y_ref, None, &cfg, loose_constraints(32)).unwrap();
        let shifted = build_qp(&xbar, &pred, &y_ref, Some(&d), &cfg, loose_constraints(32)).unwrap();
        let mut qbar_d = d.clone();
        for i in 0..np {
            let block = cfg.q * d.fixed_rows::<4>(4 * i);
            qbar_d.fixed_rows_mut::<4>(4 * i).copy_from(&block);
        }
        let expected = pred.theta.transpose() * qbar_d * 2.0;
        let delta = &shifted.f - &base.f;
        assert!((delta - &expected).amax() <= 1e-9 * expected.amax());
        assert_eq!(base.h, shifted.h);
    }

    #[test]
    fn single_step_closed_form() {
        let (_, _, _, aug, _) = circle_setup();
        let cfg = MpcConfig {
            prediction_horizon: 1,
            control_horizon: 1,
            ..MpcConfig::default()
        };
        let pred = build_prediction(&aug, 1, 1).unwrap();
        let xbar = augmented_state(
            &Vector4::new(0.4, -0.1, 0.3, 0.05),
            &Vector4::new(100.0, 50.0, 3000.0, 2000.0),
        );
        let p = build_qp(&xbar, &pred, &DVector::zeros(4), None, &cfg, loose_constraints(4)).unwrap();
        let unbounded = QpProblem::unconstrained(p.h.clone(), p.f.clone());
        let sol = solve(&unbounded, 1e-10, 200).unwrap();
        // closed form: (Theta' Q Theta + R) du = -Theta' Q Psi xbar
        let theta = &pred.theta;
        let q = DMatrix::from_column_slice(4, 4, cfg.q.as_slice());
        let r = DMatrix::from_column_slice(4, 4, cfg.r.as_slice());
        let lhs = theta.transpose() * &q * theta + r;
        let rhs = -(theta.transpose() * &q * &pred.psi * DVector::from_column_slice(xbar.as_slice()));
        let du = lhs.lu().solve(&rhs).unwrap();
        assert!((&sol.x - &du).amax() <= 1e-8 * du.amax().max(1.0));
    }

    fn drift_state_on(path: &ReferencePath, s: f64, beta: f64, lateral: f64) -> VehicleState {
        let p = path.point_at(s);
        let (nx, ny) = (-sin(p.heading), cos(p.heading));
        VehicleState {
            beta,
            omega: -p.curvature * p.speed,
            v: p.speed,
            phi: p.heading - beta,
            x: p.x + lateral * nx,
            y: p.y + lateral * ny,
        }
    }

    #[test]
    fn zero_errors_hold_previous_command() {
        let path = ReferencePath::new(CurvatureProfile::Constant(0.0), 10.0, 200.0, (0.0, 0.0), 0.0).unwrap();
        let mut ctl = MpcController::new(MpcConfig::default(), VehicleParams::default()).unwrap();
        ctl.set_projection_hint(50.0);
        let u_prev = AxleForceCommand::from_array([0.0, 0.0, 0.0, 0.0]);
        ctl.set_previous_command(u_prev);
        let state = drift_state_on(&path, 50.0, 0.0, 0.0);
        let (u, diag) = ctl.control_step(&state, &path).unwrap();
        assert_eq!(diag.qp_status, QpStatus::Optimal);
        assert!(diag.errors.to_vector().amax() < 1e-9);
        assert!((Vector4::from(u.to_array()) - Vector4::from(u_prev.to_array())).amax() < 1e-6);
    }

    #[test]
    fn left_offset_commands_negative_yaw_moment_change() {
        let params = VehicleParams::default();
        let path = ReferencePath::circle(30.0, true, 10.0, 500.0).unwrap();
        let mut ctl = MpcController::new(MpcConfig::default(), params).unwrap();
        ctl.set_projection_hint(40.0);
        let state = drift_state_on(&path, 40.0, 0.0, 0.5);
        let (_, diag) = ctl.control_step(&state, &path).unwrap();
        assert!(diag.errors.lateral > 0.45);
        assert!(diag.increment.yaw_moment(&params) < 0.0);
    }

    #[test]
    fn first_step_respects_limits() {
        let params = VehicleParams::default();
        let path = ReferencePath::circle(30.0, true, 10.0, 500.0).unwrap();
        let cfg = MpcConfig::default();
        let mut ctl = MpcController::new(cfg.clone(), params).unwrap();
        let loads = static_axle_loads(&params);
        // previous command close to the front friction limit
        let near = 0.9 * params.mu * loads.front;
        ctl.set_previous_command(AxleForceCommand::from_array([0.0, 0.0, near, 0.0]));
        let state = drift_state_on(&path, 0.0, 0.0, -2.0);
        let (u, diag) = ctl.control_step(&state, &path).unwrap();
        assert!(!diag.fallback);
        let (dfx, dfy) = cfg.increment_limits();
        assert!(diag.increment.fx_front.abs() <= dfx + 1e-9 && diag.increment.fy_front.abs() <= dfy + 1e-9);
        assert!(octagon_slacks(u.fx_front, u.fy_front, params.mu * loads.front)
            .iter()
            .all(|&s| s >= -1e-6));
    }

    #[test]
    fn compensation_off_never_touches_disturbance() {
        let params = VehicleParams::default();
        let path = ReferencePath::circle(30.0, true, 10.0, 500.0).unwrap();
        let cfg = MpcConfig {
            compensation_enabled: false,
            ..MpcConfig::default()
        };
        let mut ctl = MpcController::new(cfg, params).unwrap();
        for k in 0..5 {
            let state = drift_state_on(&path, 0.5 * k as f64, -0.1, 0.2 * k as f64);
            let (_, diag) = ctl.control_step(&state, &path).unwrap();
            assert_eq!(diag.correction_norm, 0.0);
        }
        assert_eq!(ctl.disturbance(), &DisturbanceState::default());
    }

    proptest! {
        #[test]
        fn hessian_positive_definite_over_operating_points(beta in -0.8..0.8f64, v in 3.0..20.0f64,
                                                           kappa in -0.1..0.1f64) {
            let params = VehicleParams::default();
            let cfg = MpcConfig::default();
            let reference = ReferencePoint { s: 0.0, x: 0.0, y: 0.0, heading: 0.0, curvature: kappa, speed: 10.0 };
            let model = linearize(&reference, beta, v, &params, cfg.sample_time, cfg.coupling).unwrap();
            let pred = build_prediction(&augment(&model), cfg.prediction_horizon, cfg.control_horizon).unwrap();
            let p = build_qp(&Vector8::zeros(), &pred, &DVector::zeros(120), None, &cfg, loose_constraints(32)).unwrap();
            prop_assert!((&p.h - p.h.transpose()).amax() <= 1e-12 * p.h.amax());
            prop_assert!(p.h.cholesky().is_some());
        }
    }
}
