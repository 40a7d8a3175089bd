use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("expression error at offset {offset} in `{source_text}`: {message}")]
    Expression {
        source_text: String,
        offset: usize,
        message: String,
    },

    #[error("truncation order {requested} exceeds the ceiling of {ceiling}")]
    TruncationCeiling { requested: usize, ceiling: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
