use std::path::PathBuf;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("preprocessing error in column `{column}`: {message}")]
    Preprocess { column: String, message: String },
    #[error("decode error: {0}")]
    Decode(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("fold error: {0}")]
    Fold(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("binding error: {0}")]
    Binding(String),
    #[error("frozen parameters changed: {0}")]
    Frozen(String),
    #[error("pretraining failed on dataset `{dataset}`: {source}")]
    Pretrain {
        dataset: String,
        #[source]
        source: Box<Error>,
    },
    #[error("fit error: {0}")]
    Fit(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("version mismatch: found {found}, expected {expected}")]
    Version { found: String, expected: String },
    #[error("corrupt file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
