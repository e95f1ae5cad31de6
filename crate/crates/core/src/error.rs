use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CodeqError>;

#[derive(Debug, Error)]
pub enum CodeqError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid range: lo {lo} > hi {hi}")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty tensor: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("missing gradient for parameter slot {0}")]
    MissingGrad(usize),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CodeqError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CodeqError::Io {
            path: path.into(),
            source,
        }
    }
}
