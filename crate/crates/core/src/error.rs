use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// One or more configuration fields are invalid. Every problem found is listed.
    #[error("invalid configuration: {}", .problems.join("; "))]
    Config { problems: Vec<String> },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    /// A block breaks channel signatures or skip balance.
    #[error("structural error at {block}: {reason}")]
    Structure { block: String, reason: String },

    #[error("invalid compression plan: {0}")]
    Plan(String),

    #[error("channel interpolation misuse at {block}: {reason}")]
    Misuse { block: String, reason: String },

    #[error("weight inheritance failed: {0}")]
    Inheritance(String),

    #[error("archive error: {}", .problems.join("; "))]
    Archive { problems: Vec<String> },

    #[error("non-finite {what} at iteration {iteration}")]
    Numerical { iteration: usize, what: String },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(problem: impl Into<String>) -> Self {
        Error::Config { problems: vec![problem.into()] }
    }

    pub fn archive(problem: impl Into<String>) -> Self {
        Error::Archive { problems: vec![problem.into()] }
    }

    pub fn structure(block: impl ToString, reason: impl Into<String>) -> Self {
        Error::Structure { block: block.to_string(), reason: reason.into() }
    }
}
