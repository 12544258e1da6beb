use shape_numeric::NumericError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("invalid task configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("singular configuration: atoms {i} and {j} at distance {r:e}")]
    SingularConfiguration { i: usize, j: usize, r: f64 },
    #[error("unknown task family `{0}`")]
    UnknownFamily(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("budget exhausted: {used} of {total} calls used, {requested} requested")]
    BudgetExhausted { used: u64, total: u64, requested: u64 },
    #[error("invalid oracle configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// Errors surfaced by the optimizer, trainer and diagnostics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("non-finite state in {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl ShapeError {
    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            ShapeError::NonFinite(_)
                | ShapeError::Numeric(NumericError::NonFinite { .. })
                | ShapeError::Task(TaskError::SingularConfiguration { .. })
                | ShapeError::Oracle(OracleError::Task(TaskError::SingularConfiguration { .. }))
        )
    }
}
