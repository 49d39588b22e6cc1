use thiserror::Error;

/// Errors surfaced by the engine, the model layer and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or hyperparameters that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value outside the domain an operation requires.
    #[error("domain error in `{op}` at index {index}: {msg}")]
    Domain {
        op: &'static str,
        index: usize,
        msg: String,
    },

    /// An API called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// The template violates one of the pyramidal rules or is cyclic.
    #[error("{0}")]
    Template(String),

    #[error("NaN gradient for parameter `{param}`")]
    NanGradient { param: String },

    /// A non-finite value surfaced during a forward computation.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A structured document failed the strict schema.
    #[error("schema error at `{path}`: {msg}")]
    Schema { path: String, msg: String },

    #[error("checkpoint digest mismatch: the model config hashes to {expected}, the checkpoint records {found}")]
    Digest { expected: String, found: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    /// Training finished but too many steps were skipped.
    #[error("run failed: {0}")]
    RunFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(op: &'static str, index: usize, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            index,
            msg: msg.into(),
        }
    }
}
