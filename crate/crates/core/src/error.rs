use thiserror::Error;

/// Errors produced by the alignment library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-norm vector (norm {norm:e} below 1e-12)")]
    ZeroNorm { norm: f64 },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("loss function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("row {row} has no positive match in the batch")]
    NoPositive { row: usize },

    #[error("ground modality is required but absent")]
    MissingGround,

    #[error("query {query} (identity {identity}) has no match in the gallery")]
    OrphanQuery { query: usize, identity: u32 },

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("invalid config field `{field}`: {message}")]
    ConfigInvalid { field: String, message: String },

    #[error("training diverged at step {step} (last finite step: {last_finite:?})")]
    Diverged {
        step: usize,
        last_finite: Option<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
