use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dada_core::Error),

    #[error("invalid arguments: {0}")]
    Usage(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{failed} of {total} suite cells failed; first: {first}")]
    Cells { failed: usize, total: usize, first: String, code: i32 },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        CliError::Json {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status: 2 configuration, 3 data, 4 numerical abort.
    pub fn exit_code(&self) -> i32 {
        use dada_core::Error as E;
        match self {
            CliError::Usage(_) => EXIT_CONFIG,
            CliError::Core(E::Config(_) | E::ConfigLine { .. }) => EXIT_CONFIG,
            CliError::Core(E::NonFinite { .. } | E::NonFiniteLoss(_)) => EXIT_NUMERIC,
            CliError::Cells { code, .. } => *code,
            _ => EXIT_DATA,
        }
    }
}
