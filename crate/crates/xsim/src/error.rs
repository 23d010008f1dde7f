use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed trace at line {row}: {reason}")]
    MalformedTrace { row: usize, reason: String },
    #[error("cannot read trace {path}: {source}")]
    TraceIo { path: PathBuf, source: std::io::Error },
    #[error("unknown report format {0:?}")]
    UnknownFormat(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] xsim_core::Error),
}

impl Error {
    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MalformedTrace { .. } | Error::TraceIo { .. } => 3,
            Error::Config(_) | Error::UnknownFormat(_) | Error::Core(_) => 2,
            Error::Io { .. } | Error::Check(_) => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
