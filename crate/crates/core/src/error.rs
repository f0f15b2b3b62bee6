use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not positive definite after regularization ({0})")]
    NotPositiveDefinite(&'static str),

    #[error("singular matrix ({0})")]
    Singular(&'static str),

    #[error("cost matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },

    #[error("cost matrix contains non-finite entries")]
    NonFiniteCost,

    #[error("problem size {size} exceeds the limit of {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("closed-world violation: expected {expected} measurements, found {found}")]
    ClosedWorld { expected: usize, found: usize },

    #[error("window [{start}, {end}) exceeds scenario length {len}")]
    WindowOutOfRange { start: usize, end: usize, len: usize },

    #[error("filter windows differ: {0}")]
    WindowMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for errors caused by user input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Toml(_) | Error::WindowOutOfRange { .. } | Error::TooLarge { .. }
        )
    }
}
