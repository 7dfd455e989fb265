use core::fmt;

/// Errors raised by the plant, the path geometry and the controller layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// The single-track model is singular at `v <= 0`.
    NonPositiveSpeed { v: f64 },
    /// Speed dropped below the validity floor during integration.
    SpeedBelowFloor { v: f64, floor: f64 },
    /// A state component became NaN or infinite.
    NonFiniteState,
    /// A parameter violates its invariant.
    InvalidParameter(&'static str),
    /// `1 - e_d * kappa` is too close to zero for the yaw rate law.
    DegenerateCurvature { lateral_error: f64, curvature: f64 },
    /// Projection did not find an interior minimum near the hint.
    ProjectionFailed { s_hint: f64 },
    /// A lateral force outside the friction limit was passed to the inverse
    /// tire model.
    ForceExceedsFriction { force: f64, limit: f64 },
    /// Matrix or vector dimensions do not agree.
    Dimension(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NonPositiveSpeed { v } => write!(f, "speed must be positive, got {v} m/s"),
            Error::SpeedBelowFloor { v, floor } => {
                write!(f, "speed {v} m/s fell below the model floor of {floor} m/s")
            }
            Error::NonFiniteState => write!(f, "state became non-finite"),
            Error::InvalidParameter(what) => write!(f, "invalid parameter: {what}"),
            Error::DegenerateCurvature {
                lateral_error,
                curvature,
            } => write!(
                f,
                "1 - e_d*kappa is degenerate (e_d = {lateral_error} m, kappa = {curvature} 1/m)"
            ),
            Error::ProjectionFailed { s_hint } => {
                write!(
                    f,
                    "no path projection found within the search window around s = {s_hint} m"
                )
            }
            Error::ForceExceedsFriction { force, limit } => {
                write!(f, "lateral force {force} N exceeds friction limit {limit} N")
            }
            Error::Dimension(what) => write!(f, "dimension mismatch: {what}"),
        }
    }
}

impl core::error::Error for Error {}
