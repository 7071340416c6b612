use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("parse error in {path}{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },

    #[error("validation error in segment {segment}: {message}")]
    Validation { segment: String, message: String },

    #[error("degenerate label: {0}")]
    DegenerateLabel(String),

    #[error("degenerate segment: {0}")]
    DegenerateSegment(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("preprocessing error: {0}")]
    Preprocess(String),

    #[error("structural error in {layer}: {message}")]
    Structure { layer: String, message: String },

    #[error("training fault at epoch {epoch}, batch {batch}: {message}")]
    TrainingFault {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("index {index} out of range (0..{len})")]
    OutOfRange { index: usize, len: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error")]
    Io(#[from] std::io::Error),

    #[error("JSON error")]
    Json(#[from] serde_json::Error),

    #[error("CSV error")]
    Csv(#[from] csv::Error),
}

pub(crate) fn structure(layer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Structure {
        layer: layer.into(),
        message: message.into(),
    }
}
