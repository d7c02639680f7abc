use std::path::PathBuf;

/// Errors raised anywhere in the simulator.
///
/// The variants follow the failure classes of the system: bad configuration,
/// inconsistent model shapes, unreadable data, protocol misuse, invalid
/// analysis inputs and plain I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 3 for I/O failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! model_err {
    ($($arg:tt)*) => { $crate::error::Error::Model(format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(format!($($arg)*)) };
}
macro_rules! protocol_err {
    ($($arg:tt)*) => { $crate::error::Error::Protocol(format!($($arg)*)) };
}
macro_rules! analysis_err {
    ($($arg:tt)*) => { $crate::error::Error::Analysis(format!($($arg)*)) };
}

pub(crate) use {analysis_err, config_err, data_err, model_err, protocol_err};
