use std::path::PathBuf;

/// Errors raised by the alignment pipeline.
///
/// Variants are grouped by the stage that produces them so callers (the CLI in
/// particular) can map each to a distinct exit status.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid calibration: {0}")]
    Calibration(String),

    #[error("graph construction: {0}")]
    Graph(String),

    #[error("fusion: {0}")]
    Fusion(String),

    #[error("attention: {0}")]
    Attention(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("malformed {format} data: {message}")]
    Format {
        format: &'static str,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn format(format: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            format,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
