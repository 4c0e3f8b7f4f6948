use thiserror::Error;

/// Errors surfaced by the toolkit.
///
/// `Config` and `Csv` indicate invalid user input (bad flags, malformed
/// files); the remaining variants are runtime failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("csv error at line {line}: {msg}")]
    Csv { line: usize, msg: String },

    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by invalid inputs rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Csv { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
