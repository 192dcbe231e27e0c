use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A documented precondition was violated by the caller.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed binary or text file. `offset` is the byte (or line) position.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    pub(crate) fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format { offset, detail: detail.into() }
    }

    /// Short machine-readable class name, stable across releases.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Contract { .. } => "contract",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Data(_) => "data",
            Error::NonFinite(_) => "non-finite",
            Error::Io(_) => "io",
        }
    }
}
