use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("non-finite value at coordinate {coordinate}: {detail}")]
    NonFinite { coordinate: usize, detail: String },

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("degenerate noise: zero energy over the corrupted span")]
    DegenerateNoise,

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("parse error at row {row}: {detail}")]
    Parse { row: usize, detail: String },

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn precondition<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Precondition(msg.into()))
}
