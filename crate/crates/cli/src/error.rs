use std::path::PathBuf;

use openloop_core::Error as CoreError;
use thiserror::Error;

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot parse {path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// An oracle or a replay check disagreed.
    #[error("{0}")]
    CheckFailed(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Toml { .. } | CliError::Read { .. } => EXIT_CONFIG,
            CliError::Write { .. } => EXIT_RUNTIME,
            CliError::CheckFailed(_) => EXIT_CHECK,
            CliError::Core(e) => match e {
                CoreError::InvalidDimension(_)
                | CoreError::DimensionMismatch { .. }
                | CoreError::NotHermitian(_)
                | CoreError::BadTrace(_)
                | CoreError::NotTraceless(_)
                | CoreError::NotPositive(_)
                | CoreError::NotUnitary(_)
                | CoreError::InvalidProbabilities(_)
                | CoreError::Config(_)
                | CoreError::UnsupportedDesign(_)
                | CoreError::SingularFormula(_)
                | CoreError::FactorialGuard { .. } => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
