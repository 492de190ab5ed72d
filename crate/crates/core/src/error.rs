use thiserror::Error;

/// Errors raised by the estimation, inference and study layers.
#[derive(Debug, Error)]
pub enum CelError {
    /// Malformed model description: unknown equation kind, bad indices, missing names.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates a documented precondition (non-finite values, shape mismatch).
    #[error("input error: {0}")]
    Input(String),

    /// An estimating equation produced a non-finite value.
    #[error("evaluation error in component '{component}': {message}")]
    Evaluation { component: String, message: String },

    /// A matrix that must be inverted is singular or too badly conditioned.
    #[error("singular matrix in {context}: condition number {condition:e}")]
    SingularMatrix { context: String, condition: f64 },

    /// The limiting distribution is degenerate (no positive weights, zero trace).
    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    /// Numerical routine failure other than singularity.
    #[error("numerical error: {0}")]
    Numeric(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CelError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CelError::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        CelError::Input(msg.into())
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            CelError::Config(_) => "config",
            CelError::Input(_) => "input",
            CelError::Evaluation { .. } => "evaluation",
            CelError::SingularMatrix { .. } => "singular_matrix",
            CelError::Degenerate(_) => "degenerate",
            CelError::Numeric(_) => "numeric",
            CelError::Parse { .. } => "parse",
            CelError::Io(_) => "io",
        }
    }

    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CelError::SingularMatrix { .. } | CelError::Degenerate(_) | CelError::Numeric(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, CelError>;
