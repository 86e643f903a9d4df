use thiserror::Error;

use crate::diff_engine::AdError;

#[derive(Debug, Error)]
pub enum ShnnError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("integration failed: {0}")]
    Integration(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("{path}:{line}: {message}")]
    Load {
        path: String,
        line: usize,
        message: String,
    },
    #[error("conflicting settings: {0}")]
    Conflict(String),
    #[error("training diverged at epoch {epoch}: loss {loss} (recent history {tail:?})")]
    Diverged {
        epoch: usize,
        loss: f64,
        tail: Vec<f64>,
    },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<ShnnError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = ShnnError> = std::result::Result<T, E>;
