use thiserror::Error;

/// Errors raised by the numerical core and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },

    #[error("jacobi SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("hidden unit {unit} has a zero centered pre-activation")]
    DegenerateDirection { unit: usize },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("solution infeasible: max constraint violation {violation:e}")]
    Infeasible { violation: f64 },

    #[error("training diverged at epoch {epoch} (last finite objective {last_objective:e})")]
    Divergence { epoch: usize, last_objective: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::NonFinite { .. } => "non_finite",
            Error::NonConvergence { .. } => "non_convergence",
            Error::DegenerateData(_) => "degenerate_data",
            Error::DegenerateDirection { .. } => "degenerate_direction",
            Error::Capacity(_) => "capacity",
            Error::Argument(_) => "argument",
            Error::Precondition(_) => "precondition",
            Error::Infeasible { .. } => "infeasible",
            Error::Divergence { .. } => "divergence",
            Error::Numerical(_) => "numerical",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// Process exit code for this error: 2 for configuration or input
    /// problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence { .. }
            | Error::DegenerateData(_)
            | Error::DegenerateDirection { .. }
            | Error::Infeasible { .. }
            | Error::Divergence { .. }
            | Error::Numerical(_)
            | Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
