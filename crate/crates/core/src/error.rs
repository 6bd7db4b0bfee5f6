use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("decay fit failed: {0}")]
    Fit(String),
    #[error("no suitable cut column: {0}")]
    NoCutColumn(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("snapshot line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
