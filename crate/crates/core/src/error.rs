use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("dataset overlap: {0}")]
    Overlap(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
