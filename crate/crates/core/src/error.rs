use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on shapes, ranges or counts was not met.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("matrix is not positive definite even with jitter {jitter:e}")]
    Singular { jitter: f64 },

    #[error("degenerate class boundary: |dw| = {0:e}")]
    DegenerateBoundary(f64),

    #[error("training diverged: non-finite loss at iteration {iteration}")]
    Diverged { iteration: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
