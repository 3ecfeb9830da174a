use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shape, range, arity).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed on-disk artifact.
    #[error("format error: {0}")]
    Format(String),

    #[error("not found: {0}")]
    Lookup(String),

    #[error("probability cache has no entry for sample `{0}`")]
    MissingCacheEntry(String),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
