use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("kernel system is singular even after diagonal jitter {jitter:e}")]
    Singular { jitter: f64 },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("operation requires a {expected} probe, got {found}")]
    WrongTask { expected: &'static str, found: String },

    #[error("top AGOP eigenvalue is zero; the probe carries no direction")]
    NoSignal,

    #[error("all {0} search trials failed")]
    SearchFailed(usize),

    #[error("layer {0} was not recorded")]
    LayerNotRecorded(usize),

    #[error("{0} is undefined for zero-variance input")]
    Undefined(&'static str),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_dims(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
