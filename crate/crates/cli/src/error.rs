use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read config {path}: {source}")]
    ConfigRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config {path}: {source}")]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("output directory {dir} is in use by another run; delete {lock} if that run is gone")]
    Locked { dir: PathBuf, lock: PathBuf },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data file {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Core(#[from] reflow_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration errors, 3 for numeric failures, 4 for I/O.
    pub fn exit_code(&self) -> u8 {
        use reflow_core::Error as E;
        match self {
            CliError::ConfigRead { .. } | CliError::ConfigParse { .. } | CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Locked { .. } | CliError::Io { .. } | CliError::Data { .. } => 4,
            CliError::Core(e) => match e.root() {
                E::Config(_) | E::InvalidInput(_) | E::ShapeMismatch { .. } => 2,
                E::Integration { .. } | E::Training { .. } | E::Domain(_) | E::NonScalarLoss(_) => 3,
                _ => 4,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
