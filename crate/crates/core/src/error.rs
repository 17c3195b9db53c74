use thiserror::Error;

#[derive(Debug, Error)]
pub enum NovaError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NovaError>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::NovaError::Shape(format!($($arg)*))
    };
}

macro_rules! contract_err {
    ($($arg:tt)*) => {
        $crate::error::NovaError::Contract(format!($($arg)*))
    };
}

pub(crate) use contract_err;
pub(crate) use shape_err;
