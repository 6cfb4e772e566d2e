use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input data or a violated contract (exit code 2).
    Data,
    /// Filesystem failure (exit code 3).
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("unsupported image format {0:?} (only binary P6 PPM is accepted)")]
    UnsupportedFormat(String),
    #[error("malformed PPM header: {0}")]
    MalformedHeader(String),
    #[error("unsupported PPM maxval {0} (expected 255)")]
    UnsupportedMaxval(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("file stem {0:?} carries no frame number")]
    NonNumericStem(String),

    #[error("bad magic: not an MTENSOR container")]
    BadMagic,
    #[error("corrupt container: {0}")]
    CorruptContainer(String),
    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: &'static str, found: &'static str },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attaches the path of the file the error was raised for.
    pub fn in_file(self, path: impl AsRef<Path>) -> Self {
        match self {
            e @ Error::File { .. } => e,
            e => Error::File { path: path.as_ref().to_path_buf(), source: Box::new(e) },
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io(_) => ErrorClass::Io,
            Error::File { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    /// The innermost error, with any file context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::File { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn in_file(self, path: &Path) -> Result<T>;
}

impl<T, E: Into<Error>> ResultExt<T> for std::result::Result<T, E> {
    fn in_file(self, path: &Path) -> Result<T> {
        self.map_err(|e| e.into().in_file(path))
    }
}
