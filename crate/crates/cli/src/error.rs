use std::path::PathBuf;

use eopd_core::EopdError;
use thiserror::Error;

use crate::config::{ConfigError, LoadError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Config(#[from] ConfigError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },

    #[error("{0}")]
    Input(String),

    #[error("non-finite value during training; diagnostic written to {}", path.display())]
    NonFinite { path: PathBuf },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Input(_) => 3,
            CliError::NonFinite { .. } => 4,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> Self {
        match e {
            // an unreadable config is a usage problem, not an output failure
            LoadError::Read { .. } => CliError::Usage(e.to_string()),
            LoadError::Config(c) => CliError::Config(c),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(source: std::io::Error) -> Self {
        CliError::Io {
            context: "writing outputs".into(),
            source,
        }
    }
}

impl From<EopdError> for CliError {
    fn from(e: EopdError) -> Self {
        match e {
            EopdError::InvalidArgument(m) | EopdError::Config(m) => CliError::Usage(m),
            EopdError::Io(source) => CliError::Io {
                context: "i/o".into(),
                source,
            },
            EopdError::Format(m) => CliError::Input(m),
            EopdError::Json(e) => CliError::Input(e.to_string()),
            e @ EopdError::NonFinite { .. } => CliError::Input(e.to_string()),
        }
    }
}
