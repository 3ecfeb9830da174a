use std::fmt;
use std::path::Path;

/// Failure classes with distinct exit statuses.
#[derive(Debug)]
pub enum CliError {
    /// Bad flag value or malformed configuration: exit 2.
    Usage(String),
    /// A required input artifact does not exist: exit 3.
    Missing { what: String, path: String },
    /// Anything that went wrong while doing the work: exit 1.
    Failed(anyhow::Error),
}

impl CliError {
    pub fn missing(what: &str, path: &Path) -> Self {
        Self::Missing { what: what.to_string(), path: path.display().to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Missing { .. } => 3,
            Self::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Missing { what, path } => write!(f, "missing {what}: {path}"),
            Self::Failed(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self::Failed(e)
    }
}

impl From<vaex_core::Error> for CliError {
    fn from(e: vaex_core::Error) -> Self {
        match e {
            vaex_core::Error::Contract(m) => Self::Usage(m),
            other => Self::Failed(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Failed(e.into())
    }
}

/// Fails with exit status 3 unless `path` exists.
pub fn require(what: &str, path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(what, path))
    }
}
