use std::path::PathBuf;

/// Errors produced anywhere in the detector pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis `{axis}`: {detail}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        detail: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{op}: degenerate batch (batch size {batch}, need at least 2 in train mode)")]
    DegenerateBatch { op: &'static str, batch: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("function is not deterministic: two forward passes gave {first} and {second}")]
    Determinism { first: f64, second: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (sample ids {sample_ids:?}): {breakdown}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        sample_ids: Vec<u64>,
        breakdown: String,
    },

    #[error("ratio undefined: in-domain average accuracy is zero")]
    UndefinedRatio,

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
