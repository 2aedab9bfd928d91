use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("taxonomy error: {0}")]
    Taxonomy(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

impl Error {
    /// Process exit status: 2 for configuration and input problems, 3 for
    /// corrupted data or checkpoints, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Integrity(_) => 3,
            Error::Input(_)
            | Error::Config(_)
            | Error::Taxonomy(_)
            | Error::Generation(_)
            | Error::Io { .. }
            | Error::Json { .. } => 2,
            Error::Shape { .. } | Error::Contract(_) => 1,
        }
    }
}
