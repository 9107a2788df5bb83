use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Error, Debug)]
pub enum MirError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("autodiff error: {0}")]
    Autodiff(String),
}

pub type Result<T> = std::result::Result<T, MirError>;
