use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("softmax row {0} is fully masked")]
    FullyMaskedRow(usize),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {0} out of range for vocabulary of size {1}")]
    UnknownTokenId(usize, usize),
    #[error("parameter {0:?} registered twice")]
    DuplicateParam(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("backward target is not a scalar")]
    NotScalar,
    #[error("backward target was not produced under this tape")]
    NotOnTape,
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("non-finite gradient for {0}; aborting optimizer step")]
    NanGradient(String),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
