use std::path::PathBuf;

/// Errors produced anywhere in the simulation stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape or length mismatch,
    /// empty slot, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A signal with zero energy cannot be scaled to meet the power constraint.
    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    /// An objective evaluated to a non-finite value.
    #[error("non-finite objective value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },

    /// An optimizer run blew up.
    #[error("optimization diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    /// Invalid or unresolvable configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the `cagi` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Config(_) => 2,
            Error::DegenerateSignal(_) | Error::NonFinite { .. } | Error::Divergence { .. } => 3,
            Error::Io { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::contract(format!("{what}: length {got}, expected {expected}")));
    }
    Ok(())
}
