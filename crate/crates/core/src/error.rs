use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity surfaced during computation. `index` is the step,
    /// parameter index, or other coordinate that produced it.
    #[error("numerical failure in {stage} at index {index}: {detail}")]
    NumericalFailure {
        stage: &'static str,
        index: usize,
        detail: String,
    },

    #[error("prompt has no optimizable content tokens")]
    NoContent,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error (line {line}, key `{key}`): {message}")]
    Config {
        line: usize,
        key: String,
        message: String,
    },

    #[error("file error at {path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("sampling failed for prompt {prompt}, seed {seed}, variant {variant}: {source}")]
    Rollout {
        prompt: usize,
        seed: usize,
        variant: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(stage: &'static str, index: usize, detail: impl Into<String>) -> Self {
        Error::NumericalFailure {
            stage,
            index,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(line: usize, key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            line,
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn file(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::File {
            path: path.into(),
            message: err.to_string(),
        }
    }
}

pub(crate) fn check_same_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{what}: dimension mismatch ({a} vs {b})")));
    }
    Ok(())
}
