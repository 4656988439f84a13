use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing parameter {0:?}")]
    MissingParam(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
