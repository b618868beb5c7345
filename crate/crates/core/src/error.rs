use thiserror::Error;

pub type Result<T> = std::result::Result<T, GmcfError>;

#[derive(Debug, Error)]
pub enum GmcfError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no embedding for attribute id {0}")]
    MissingEmbedding(usize),

    #[error("shape mismatch in {primitive}: {detail}")]
    Shape { primitive: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("cannot draw negatives for user {user}: {message}")]
    Sampling { user: String, message: String },

    #[error("unsupported checkpoint format")]
    UnsupportedFormat,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GmcfError {
    pub(crate) fn shape(primitive: &'static str, detail: impl Into<String>) -> Self {
        GmcfError::Shape {
            primitive,
            detail: detail.into(),
        }
    }
}
