use thiserror::Error;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Integrity,
    Transport,
    Other,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{column}` in {path}")]
    Schema { column: String, path: String },

    #[error("row error at row {row} in {path}: {message}")]
    Row {
        row: usize,
        path: String,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("coverage error: missing (expert, task) pairs: {}", .0.join(", "))]
    Coverage(Vec<String>),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("request rejected by content filter: {0}")]
    ContentFilter(String),

    #[error("corrupt checkpoint line {line} in {path}: {message}")]
    Checkpoint {
        line: usize,
        path: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Schema { .. }
            | Error::Row { .. }
            | Error::Integrity(_)
            | Error::Coverage(_)
            | Error::Checkpoint { .. } => ErrorKind::Integrity,
            Error::Transport { .. } | Error::ContentFilter(_) => ErrorKind::Transport,
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => ErrorKind::Other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
