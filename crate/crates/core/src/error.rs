use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("state error: {0}")]
    State(String),

    #[error("page {page} of layer {layer} is not device-resident")]
    Residency { layer: usize, page: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}
