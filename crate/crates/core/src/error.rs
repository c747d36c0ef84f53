use thiserror::Error;

use crate::optics::Coefficient;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{coefficient} = {value} nm is outside [{lower}, {upper}] nm")]
    OutOfBounds {
        coefficient: Coefficient,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("unsupported schema: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::NumericalFailure(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
