use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not satisfy an operation's contract.
    #[error("dimension error at {node}: {msg}")]
    Dimension { node: String, msg: String },

    /// A value became NaN/Inf, or a factorization broke down.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration; `key` names the offending entry.
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    /// Missing or malformed columns in an input file.
    #[error("schema error: {0}")]
    Schema(String),

    /// A field in an input file could not be parsed.
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn numeric(msg: impl Into<String>) -> Error {
    Error::Numeric(msg.into())
}
