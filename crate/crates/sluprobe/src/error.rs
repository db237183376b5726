use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: conversation {id} is invalid: {violations}")]
    InvalidConversation {
        line: usize,
        id: String,
        violations: String,
    },
    #[error("store integrity: {0}")]
    Integrity(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] sluprobe_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl std::fmt::Display) -> Self {
        Error::Parse {
            line,
            message: message.to_string(),
        }
    }
}
