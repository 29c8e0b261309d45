use thiserror::Error;

/// Errors raised by the flow library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("empty reduction")]
    EmptyReduction,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("stale or missing forward cache")]
    StaleCache,
    #[error("numerical overflow in layer {layer}")]
    NumericalOverflow { layer: usize },
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("{dropped} of {total} samples produced non-finite values")]
    TooManyNonFinite { dropped: usize, total: usize },
    #[error("grid too small: density mass on the grid is {mass:.6}")]
    GridTooSmall { mass: f64 },
    #[error("degenerate envelope: acceptance rate {rate:.3e}")]
    DegenerateEnvelope { rate: f64 },
    #[error("too few non-empty bins: {0}")]
    TooFewBins(usize),
}

pub type Result<T> = std::result::Result<T, FlowError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(FlowError::DimensionMismatch { expected, got })
    }
}
