use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("operator is not Hermitian (relative defect {defect:.3e})")]
    NotHermitian { defect: f64 },

    #[error("metric is singular or not positive definite (min eigenvalue {min_eig:.3e})")]
    SingularMetric { min_eig: f64 },

    #[error("metric lost positivity at t = {t}: min eigenvalue {min_eig:.3e} below floor {floor:.3e}")]
    PositivityLoss { t: f64, min_eig: f64, floor: f64 },

    #[error("eigen-solver failed: {0}")]
    EigenFailure(String),

    #[error("unsupported cone: {0}")]
    UnsupportedCone(String),

    #[error("bisection failed to bracket a root: {0}")]
    Bracketing(String),

    #[error("input is not a boundary pair: pairing defect {defect:.3e} exceeds {tol:.3e}")]
    NotBoundary { defect: f64, tol: f64 },

    #[error("adaptive step size underflow at t = {t} (dt = {dt:.3e})")]
    StepUnderflow { t: f64, dt: f64 },

    #[error("numerical blow-up at t = {t}: norm {norm:.3e}")]
    BlowUp { t: f64, norm: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("undeclared index signature: {0}")]
    Signature(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
