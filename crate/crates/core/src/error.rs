use thiserror::Error;

/// Errors raised anywhere in the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed PNM header: {0}")]
    PnmHeader(String),
    #[error("unsupported PNM variant: {0}")]
    PnmUnsupported(String),
    #[error("truncated PNM payload: expected {expected} bytes, found {found}")]
    PnmTruncated { expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error at {layer}: {detail}")]
    Shape { layer: String, detail: String },
    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("checkpoint: bad magic {0:?}")]
    CheckpointMagic([u8; 4]),
    #[error("checkpoint: unsupported version {found} (this build reads version {supported})")]
    CheckpointVersion { found: u32, supported: u32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
