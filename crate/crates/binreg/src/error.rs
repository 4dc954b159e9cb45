//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while validating data, fitting, or
/// evaluating population quantities.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-binary outcome in row {row}: {value}")]
    NonBinaryOutcome { row: usize, value: f64 },

    #[error("non-finite covariate in row {row}")]
    NonFiniteCovariate { row: usize },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("information matrix is numerically singular (condition number > {max_condition:.1e})")]
    SingularInformation { max_condition: f64 },

    #[error("fit did not converge: {status}")]
    FitFailed { status: crate::fit::FitStatus },

    #[error("insufficient local mass at the query point: effective sample size {ess:.3} < {required}")]
    InsufficientLocalMass { ess: f64, required: f64 },

    #[error("degenerate importance weights: effective sample size {ess:.1} < {required}")]
    DegenerateImportanceWeights { ess: f64, required: f64 },

    #[error("empty class: {0}")]
    EmptyClass(String),

    #[error("single-class data: both outcomes must be present")]
    SingleClassData,

    #[error("unsupported distribution/dimension combination: {0}")]
    UnsupportedDistribution(String),

    #[error("population maximizer diverged (suspected support separation): {0}")]
    OracleDivergence(String),

    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),

    #[error("replication failure budget exceeded: {failed} of {total} replications failed")]
    FailureBudgetExceeded { failed: usize, total: usize },

    #[error("too many bootstrap refits dropped: {dropped} of {total}")]
    BootstrapDropBudgetExceeded { dropped: usize, total: usize },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("CSV parse error: {0}")]
    Csv(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
