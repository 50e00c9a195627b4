use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. `Parse`/`InvalidInput`/`Config`/`Mismatch` are
/// caller mistakes; the rest indicate environment or runtime failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("incompatible data: {0}")]
    Mismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged (non-finite loss) at step {step}{}", last_good.as_ref().map(|p| format!(", last good checkpoint: {}", p.display())).unwrap_or_default())]
    Diverged {
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error is the caller's fault (CLI exit code 1 vs 2).
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::InvalidInput(_)
                | Error::Config(_)
                | Error::Mismatch(_)
                | Error::Io { .. }
                | Error::Image(_)
                | Error::Checkpoint(_)
        )
    }
}
