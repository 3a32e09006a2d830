use prosody_core::Error;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 0 success, 2 usage or config, 3 IO, 4 numeric failure, 5 data mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                Error::Io { .. } | Error::ParseAt { .. } | Error::ParseLine { .. } => 3,
                Error::Diverged { .. } | Error::Numeric(_) | Error::Domain(_) => 4,
                Error::Mismatch { .. } => 5,
                _ => 2,
            },
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}
