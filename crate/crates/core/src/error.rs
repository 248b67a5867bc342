use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no embedding found for class `{0}`")]
    MissingEmbedding(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("cannot normalize a zero-norm vector")]
    ZeroNorm,

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    Numerical(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("evaluation mode {mode} is not supported by this split: {reason}")]
    ModeMismatch { mode: String, reason: String },

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
