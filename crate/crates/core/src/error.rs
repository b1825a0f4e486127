use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing data file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("field `{field}`: id {id} out of vocabulary (size {vocab})")]
    OutOfVocabulary {
        field: String,
        id: usize,
        vocab: usize,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numerical fault: {0}")]
    Numerical(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for faults caused by the numbers rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
