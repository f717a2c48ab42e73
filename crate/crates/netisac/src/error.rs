use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("estimate diverged at iteration {iteration}, user {user}")]
    Divergence { iteration: usize, user: usize },

    #[error("degenerate data-symbol estimate: {0}")]
    DegenerateEstimate(String),

    #[error("stability condition violated: {0}")]
    Stability(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
