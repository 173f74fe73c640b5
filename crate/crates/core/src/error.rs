use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by operator `{op}`")]
    NonFinite { op: String },

    #[error("gradient requested for non-scalar output of shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for failures caused by numerics (non-finite values) rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }

    /// True for failures reading or writing files.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
