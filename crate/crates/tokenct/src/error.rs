use std::path::PathBuf;

/// Errors raised by file formats, training and the command line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] tokenct_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: byte {offset}: {message}")]
    Format { path: PathBuf, offset: u64, message: String },
    #[error("{path}: truncated at byte {offset}: expected {expected} bytes, found {actual}")]
    Truncated { path: PathBuf, offset: u64, expected: u64, actual: u64 },
    #[error("{path}: line {line}: {message}")]
    Text { path: PathBuf, line: usize, message: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Dependency(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status: 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use tokenct_core::Error as C;
        match self {
            Error::Core(C::Numerical(_)) => 3,
            Error::Core(C::Usage(_) | C::Index(_) | C::Dimension(_) | C::Spec(_)) | Error::Config(_) => 1,
            _ => 2,
        }
    }
}
