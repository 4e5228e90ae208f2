use thiserror::Error;

/// Errors produced by the kit. Shape diagnostics carry enough context to
/// identify the offending tensor or layer without a debugger.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("groups={groups} must divide in_channels={in_channels} and out_channels={out_channels}")]
    BadGroups {
        groups: usize,
        in_channels: usize,
        out_channels: usize,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("weight entry mismatch: {0}")]
    WeightMismatch(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
