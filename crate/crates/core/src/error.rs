use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({t}, {x}) does not lie on a grid node")]
    OffGrid { t: f64, x: f64 },

    #[error("point ({t}, {x}) lies outside the grid horizon")]
    OutsideHorizon { t: f64, x: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("root bracket [{lo}, {hi}] does not change sign")]
    BracketFailure { lo: f64, hi: f64 },

    #[error("a measure source is required by measure-dependent coefficients")]
    MissingMeasure,

    #[error("kernel a{0} needs the paired-node context")]
    MissingPairContext(usize),

    #[error("test function provides derivatives up to order {provided}, need {required}")]
    DerivativeOrder { provided: usize, required: usize },

    #[error("malformed sheet file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
