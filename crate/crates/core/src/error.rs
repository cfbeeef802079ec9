use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the estimators, the simulator and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Pitch is at ±90° so yaw and roll are not separable.
    #[error("degenerate yaw/roll-pitch factorization (|R31| = {0})")]
    DegenerateFactorization(f64),
    /// A point lies on or behind the camera plane.
    #[error("point behind camera (depth {0:.3e} m)")]
    BehindCamera(f64),
    /// Zero translation leaves the epipolar geometry undefined.
    #[error("degenerate epipolar geometry: translation is zero")]
    DegenerateEpipolar,
    /// Line coefficients with a vanishing normal (line at infinity).
    #[error("degenerate epipolar line (normal norm {0:.3e})")]
    DegenerateLine(f64),
    #[error("unsupported configuration: {0}")]
    UnsupportedConfiguration(String),
    /// Stereo rays are parallel or diverge.
    #[error("non-positive disparity {0:.3e}")]
    NonPositiveDisparity(f64),
    #[error("insufficient data: need {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    /// A normal matrix is singular or too badly conditioned to solve.
    #[error("degenerate geometry (condition number {0:.3e})")]
    DegenerateGeometry(f64),
    #[error("ambiguous yaw: |(cos, sin)| = {0:.3e}")]
    AmbiguousYaw(f64),
    /// A minimal sample does not determine a model.
    #[error("degenerate minimal sample")]
    DegenerateSample,
    #[error("consensus failure after {iterations} iterations (best inlier count {best})")]
    ConsensusFailure { iterations: usize, best: usize },
    #[error("IMU stream out of order at sample {0}")]
    StreamOrder(usize),
    /// Accelerometer magnitude too small to carry gravity information.
    #[error("unreliable accelerometer sample (|a| = {0:.3} m/s^2)")]
    FreeFall(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateFactorization(_) => "degenerate_factorization",
            Error::BehindCamera(_) => "behind_camera",
            Error::DegenerateEpipolar => "degenerate_epipolar",
            Error::DegenerateLine(_) => "degenerate_line",
            Error::UnsupportedConfiguration(_) => "unsupported_configuration",
            Error::NonPositiveDisparity(_) => "non_positive_disparity",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::DegenerateGeometry(_) => "degenerate_geometry",
            Error::AmbiguousYaw(_) => "ambiguous_yaw",
            Error::DegenerateSample => "degenerate_sample",
            Error::ConsensusFailure { .. } => "consensus_failure",
            Error::StreamOrder(_) => "stream_order",
            Error::FreeFall(_) => "free_fall",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Csv { .. } => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
