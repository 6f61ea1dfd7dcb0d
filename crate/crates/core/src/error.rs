use thiserror::Error;

pub type Result<T> = std::result::Result<T, FcclError>;

#[derive(Debug, Error)]
pub enum FcclError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate vector: l2 norm {norm:e} is below 1e-12")]
    DegenerateVector { norm: f64 },

    #[error("invalid state: {0}")]
    State(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("undefined projection: {0}")]
    UndefinedProjection(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("non-finite loss at step {step} (epoch {epoch})")]
    NonFiniteLoss { step: usize, epoch: usize },

    #[error("degenerate feature at step {step} (epoch {epoch}): {source}")]
    DegenerateFeature {
        step: usize,
        epoch: usize,
        #[source]
        source: Box<FcclError>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Format(String),
}

impl FcclError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FcclError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        FcclError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
