use std::path::PathBuf;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    /// Bad configuration, flags or input files.
    #[error("{0}")]
    Validation(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("checkpoint {path} was written for configuration {found}, expected {expected}")]
    StaleCheckpoint {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: content hash {found} does not match manifest hash {expected}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Core(#[from] qac_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    pub fn validation(msg: impl Into<String>) -> Self {
        LabError::Validation(msg.into())
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        LabError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code: 1 for validation failures, 2 for runtime ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Validation(_)
            | LabError::Parse { .. }
            | LabError::StaleCheckpoint { .. }
            | LabError::HashMismatch { .. } => 1,
            LabError::Core(_) | LabError::Io { .. } => 2,
        }
    }
}

/// Attaches a path to IO errors.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| LabError::Io {
            path: path.into(),
            source,
        })
    }
}
