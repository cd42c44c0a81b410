use thiserror::Error;

/// Unified error type for the whole crate.
///
/// `Config` marks invalid user input (bad config values, contract
/// violations on public entry points); everything else is a runtime
/// failure. The CLI maps the two groups to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("oracle failure: {0}")]
    Oracle(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    /// True for errors caused by invalid user input rather than runtime
    /// failures; used by the CLI to pick the exit code.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
