use std::path::PathBuf;

use thiserror::Error;

/// Invalid values passed to a scoring or sampling routine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum InputError {
    #[error("biomarker {name} must be positive, got {value}")]
    NonPositiveBiomarker { name: &'static str, value: f64 },
    #[error("mortality equivalent must lie in (0, 1), got {0}")]
    EquivalentOutOfRange(f64),
    #[error("unknown blood group {0:?}")]
    UnknownBloodGroup(String),
    #[error("unknown country code {0:?}")]
    UnknownCountry(String),
    #[error("uniform draw must lie in (0, 1), got {0}")]
    UniformOutOfRange(f64),
}

/// Problems with parameter or configuration files, detected at load time.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("missing parameter selector {0}")]
    MissingSelector(String),
    #[error("unknown covariate {0:?}")]
    UnknownCovariate(String),
    #[error("{path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
}

/// Load failure naming the file and, where known, the 1-based data row.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: cannot read: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: row {row}: {message}")]
    Row {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl LoadError {
    pub fn row(path: impl Into<PathBuf>, row: usize, message: impl Into<String>) -> Self {
        LoadError::Row {
            path: path.into(),
            row,
            message: message.into(),
        }
    }

    pub fn file(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        LoadError::File {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Failures that abort a simulation run.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("internal consistency fault: {0}")]
    Fault(String),
    #[error("parameter fault: {0}")]
    Parameter(String),
    #[error(transparent)]
    Input(#[from] InputError),
    #[error("invalid data: {0}")]
    Data(String),
}
