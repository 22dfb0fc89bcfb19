use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dataset: {0}")]
    Dataset(String),

    #[error("a dataset manifest already exists at {0}")]
    ManifestExists(PathBuf),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sequence out of range: t={t} + N={n} * dt={dt} exceeds T_d={t_d}")]
    SequenceRange { t: usize, n: usize, dt: usize, t_d: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("environment: {0}")]
    Env(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
