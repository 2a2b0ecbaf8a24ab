//! Crate-wide error type.
//!
//! Validation failures (bad inputs, violated model invariants) are kept
//! apart from runtime failures (I/O, solver breakdown) so the CLI can map
//! them to distinct exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, found {found}")]
    DimensionMismatch {
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("transition kernel row (s={state}, a={action}) sums to {sum}, not 1")]
    KernelRowSum { state: usize, action: usize, sum: f64 },

    #[error("behavior policy assigns zero probability to (s={state}, a={action})")]
    CoverageViolation { state: usize, action: usize },

    #[error("feature matrix is rank deficient (rank {rank} < {columns} columns)")]
    RankDeficient { rank: usize, columns: usize },

    #[error("stationary distribution solve failed: residual {residual:.3e} (chain may be reducible)")]
    StationaryFailed { residual: f64 },

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error("state weight vector has min entry {min:.3e}; projection requires strictly positive weights")]
    NonpositiveWeight { min: f64 },

    #[error("interest function must be strictly positive, found {value} at state {state}")]
    NonpositiveInterest { state: usize, value: f64 },

    #[error("query time {t} is outside the recorded horizon [0, {horizon}]")]
    OutOfHorizon { t: f64, horizon: f64 },

    #[error("segment {segment} is not fully recorded")]
    MissingSegment { segment: usize },

    #[error("evaluation grids do not match: {0}")]
    GridMismatch(String),

    #[error("ODE step size underflow at t={t:.6e} (step {step:.3e})")]
    StepSizeUnderflow { t: f64, step: f64 },

    #[error("need at least {required} samples, got {got}")]
    InsufficientSamples { required: usize, got: usize },

    #[error("unknown builtin environment '{0}'")]
    UnknownEnvironment(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code: 1 for validation failures, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Json(_) | Error::StepSizeUnderflow { .. } => 2,
            Error::MissingArtifact(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
