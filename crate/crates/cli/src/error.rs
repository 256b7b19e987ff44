use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] stablerep::Error),
    #[error("{path}: {source}")]
    Input {
        path: PathBuf,
        source: stablerep::Error,
    },
    #[error("config {path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error("output directory {0} already exists (use --force to replace it)")]
    OutputExists(PathBuf),
    #[error("{0}")]
    Usage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Input { source, .. } => source.kind(),
            CliError::Config { .. } => "config",
            CliError::OutputExists(_) => "output_exists",
            CliError::Usage(_) => "usage",
            CliError::Io(_) => "io",
        }
    }

    /// One-line JSON record for stderr.
    pub fn record(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            error: &'a str,
            message: String,
        }
        serde_json::to_string(&Record {
            error: self.kind(),
            message: self.to_string(),
        })
        .expect("plain strings serialize")
    }
}

/// Attach the path to errors from reading an input file.
pub fn read_input<T>(
    path: &std::path::Path,
    read: impl FnOnce(&std::path::Path) -> stablerep::Result<T>,
) -> CliResult<T> {
    read(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })
}

pub type CliResult<T> = std::result::Result<T, CliError>;
