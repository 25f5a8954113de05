//! Crate-wide error type.

/// Errors raised anywhere in the pipeline.
///
/// `Shape` and `Invalid` are contract violations (bad dimensions, bad
/// configuration, malformed files); `NonFinite` marks numeric failure and is
/// mapped to a distinct process exit code by the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input shapes incompatible with an operation; names the operation and
    /// the offending dimensions.
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// A primitive name that the engine does not know.
    #[error("unknown primitive kind `{0}`")]
    UnknownPrimitive(String),

    /// Invalid argument, configuration or state.
    #[error("{0}")]
    Invalid(String),

    /// NaN or infinity produced where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed serialized data (tensor files, checkpoints, config files).
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
}

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format { what, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
