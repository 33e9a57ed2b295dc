use std::path::{Path, PathBuf};

pub type Result<T> = std::result::Result<T, PgsError>;

#[derive(Debug, thiserror::Error)]
pub enum PgsError {
    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("malformed archive {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Core(#[from] pgs_core::Error),
}

impl PgsError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PgsError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        PgsError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    /// 2 for usage and input problems, 3 for incompatible checkpoints, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PgsError::Usage(_) | PgsError::Io { .. } | PgsError::Image { .. } | PgsError::Data(_) => 2,
            PgsError::Incompatible(_) => 3,
            PgsError::Core(e) if matches!(e.root(), pgs_core::Error::Incompatible(_)) => 3,
            PgsError::Format { .. } | PgsError::Core(_) => 1,
        }
    }
}
