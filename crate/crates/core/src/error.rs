//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by data loading, estimation, and inference routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing cell: unit `{unit}` has no row for period `{period}`")]
    MissingCell { unit: String, period: String },

    #[error("duplicate cell: unit `{unit}`, period `{period}` appears more than once")]
    DuplicateCell { unit: String, period: String },

    #[error("non-binary outcome `{value}` at unit `{unit}`, period `{period}`")]
    NonBinaryOutcome {
        unit: String,
        period: String,
        value: String,
    },

    #[error("non-finite covariate x{covariate} at unit `{unit}`, period `{period}`")]
    NonFiniteCovariate {
        unit: String,
        period: String,
        covariate: usize,
    },

    #[error("covariate x{0} has zero variance and cannot be standardized")]
    ZeroVariance(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite index encountered in likelihood evaluation")]
    NonFiniteIndex,

    #[error("optimizer failed to converge within {0} iterations")]
    Nonconvergence(usize),

    #[error("proximal gradient exceeded {0} iterations")]
    MaxIterations(usize),

    #[error("line search step size underflow")]
    StepSizeUnderflow,

    #[error("weighted Gram matrix is singular for {0}")]
    SingularBlock(String),

    #[error("curvature matrix W is singular")]
    SingularW,

    #[error("sub-panel fit failed for {half}: {source}")]
    SubfitFailure {
        half: String,
        #[source]
        source: Box<Error>,
    },

    #[error("all {0} bootstrap replicates failed")]
    AllReplicatesFailed(usize),

    #[error("bootstrap run is empty")]
    EmptyRun,

    #[error("too few successful replicates: {have} < {need}")]
    TooFewReplicates { have: usize, need: usize },

    #[error("value {value} outside the domain of the {transform} transform")]
    DomainError { transform: String, value: f64 },

    #[error("csv parse error: {0}")]
    Csv(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
