use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SfError>;

#[derive(Debug, Error)]
pub enum SfError {
    /// Bad input data: non-finite coordinates, duplicates, malformed CSV rows.
    #[error("ingest error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Ingest { line: Option<usize>, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("initialization error: {0}")]
    Init(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A local kriging system was not positive definite.
    #[error("factorization failed at location {location}: {msg}")]
    Factorization { location: usize, msg: String },

    /// Sampler failure; carries the iteration and block that failed.
    #[error("numerical failure at iteration {iteration} in block '{block}': {msg}")]
    Numerical {
        iteration: usize,
        block: String,
        msg: String,
    },

    #[error("archive error: {0}")]
    Archive(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SfError {
    pub fn ingest(msg: impl Into<String>) -> Self {
        SfError::Ingest {
            line: None,
            msg: msg.into(),
        }
    }

    pub fn ingest_at(line: usize, msg: impl Into<String>) -> Self {
        SfError::Ingest {
            line: Some(line),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SfError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable error kind, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            SfError::Ingest { .. } => "ingest",
            SfError::Config(_) => "config",
            SfError::Init(_) => "init",
            SfError::Dimension(_) => "dimension",
            SfError::Factorization { .. } => "factorization",
            SfError::Numerical { .. } => "numerical",
            SfError::Archive(_) => "archive",
            SfError::Io { .. } => "io",
        }
    }
}
