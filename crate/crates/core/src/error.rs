use thiserror::Error;

/// Errors raised anywhere in the crate.
///
/// The variants map onto the CLI exit-code contract: configuration and
/// format problems are user errors, `Diverged` is a training outcome.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("seed {seed}: {source}")]
    Trial {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True when the root cause is a training divergence.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::Diverged { .. } => true,
            Error::Trial { source, .. } => source.is_divergence(),
            _ => false,
        }
    }

    /// True when the root cause is a user-facing configuration or input problem.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Format { .. } | Error::Io(_) => true,
            Error::Trial { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
