use std::path::PathBuf;

/// Errors produced by the library.
///
/// `Display` output starts with a category prefix (`dimension error:`, `config error:` ...)
/// which the CLI forwards verbatim.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {context}: axis {axis} expected {expected}, got {got}")]
    Dimension {
        context: String,
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("io error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("divergence error: training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(context: impl Into<String>, axis: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            axis,
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category name, used for exit codes and log prefixes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Numeric(_) => "numeric",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Load(_) => "load",
            Error::Io { .. } => "io",
            Error::Diverged { .. } => "divergence",
        }
    }
}
