use std::fmt;
use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug)]
pub enum Error {
    Io { path: PathBuf, source: io::Error },
    /// Malformed binary file; `offset` is the byte position of the problem.
    Format { offset: u64, message: String },
    /// Checkpoint or volume written by another format version.
    Version { found: u32, expected: u32 },
    /// Bad configuration text: `line` is 1-based.
    Config { line: usize, message: String },
    Csv(String),
    Core(onh_core::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            Error::Version { found, expected } => write!(
                f,
                "format version {found} is not supported (expected {expected})"
            ),
            Error::Config { line, message } => write!(f, "config line {line}: {message}"),
            Error::Csv(m) => write!(f, "csv error: {m}"),
            Error::Core(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            Error::Core(e) => Some(e),
            _ => None,
        }
    }
}

impl From<onh_core::Error> for Error {
    fn from(e: onh_core::Error) -> Self {
        Error::Core(e)
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
