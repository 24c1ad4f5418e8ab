use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CatError>;

#[derive(Debug, Error)]
pub enum CatError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl CatError {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        CatError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        CatError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CatError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CatError::Data(msg.into())
    }
}

impl From<serde_json::Error> for CatError {
    fn from(e: serde_json::Error) -> Self {
        CatError::Data(format!("json: {e}"))
    }
}
