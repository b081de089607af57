use std::io;
use std::path::PathBuf;

use mma_core::{ConfigError, RunError};
use thiserror::Error;

use crate::format::FormatError;

/// Exit code of a bad invocation: unknown flag, missing store, invalid config.
pub const EXIT_USAGE: u8 = 2;
/// Exit code of a failure while running a valid invocation.
pub const EXIT_RUNTIME: u8 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Run(RunError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(ConfigError::Invalid(msg)) => CliError::Usage(msg),
            other => CliError::Run(other),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let ConfigError::Invalid(msg) = e;
        CliError::Usage(msg)
    }
}

impl CliError {
    /// Stable, machine-parseable category printed as `error[<category>]`.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Format(f) => match f {
                FormatError::Io { .. } => "io",
                FormatError::Manifest(_) | FormatError::UnsupportedFormat(_) => "manifest",
                FormatError::CountMismatch { .. } => "count-mismatch",
                FormatError::ShapeMismatch { .. } => "shape-mismatch",
                FormatError::Checksum { .. } => "checksum",
                FormatError::NonFinite { .. } => "non-finite",
                FormatError::NotNormalized { .. } => "not-normalized",
                FormatError::LabelOutOfRange { .. } => "label-range",
                FormatError::Data(_) => "data",
            },
            CliError::Run(r) => match r {
                RunError::Tensor(_) => "tensor",
                RunError::Config(_) => "usage",
                RunError::Data(_) => "data",
                RunError::NonFiniteGradient { .. } => "numeric",
                RunError::UndefinedMetric(_) => "metric",
            },
        }
    }

    pub fn exit_code(&self) -> u8 {
        if self.category() == "usage" {
            EXIT_USAGE
        } else {
            EXIT_RUNTIME
        }
    }

    /// `error[category]: message` on one line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {}", self.category(), msg)
    }
}
