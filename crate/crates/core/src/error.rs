use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty dataset")]
    EmptyDataset,

    #[error("need at least two identities")]
    NotEnoughIdentities,

    #[error("empty pool")]
    EmptyPool,

    #[error("empty effective gallery")]
    EmptyGallery,

    #[error("no evaluable query ({skipped} skipped)")]
    NoEvaluableQueries { skipped: usize },

    #[error("ranking has no relevant item")]
    NoRelevantItems,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("line {line}: dimension mismatch: expected {expected}, found {found}")]
    LineDimensionMismatch { line: usize, expected: usize, found: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-finite value in feature vector")]
    NonFinite,

    #[error("label {label} out of range for {num_identities} identities")]
    LabelOutOfRange { label: usize, num_identities: usize },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
