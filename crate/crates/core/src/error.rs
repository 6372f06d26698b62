use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} on {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated buffer at byte offset {offset}: {detail}")]
    TruncatedBuffer { offset: u64, detail: String },

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("tensor `{name}`: unsupported dtype `{dtype}`")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("invalid tensor `{name}`: {detail}")]
    InvalidTensor { name: String, detail: String },

    #[error("model mismatch on tensor `{tensor}` between `{base}` and `{other}`: {detail}")]
    Alignment {
        tensor: String,
        base: String,
        other: String,
        detail: String,
    },

    #[error("all task layers have zero norm")]
    AllZeroLayers,

    #[error("task {index} has a zero-norm layer")]
    ZeroNormTask { index: usize },

    #[error("empty group")]
    EmptyGroup,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
