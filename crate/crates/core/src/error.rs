use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
///
/// The variant name doubles as a stable, machine-readable error kind (see
/// [`Error::kind`]), which the command-line front end prints as a prefix.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("unit error: expected {expected}, found {found}")]
    Unit { expected: String, found: String },

    #[error("unmapped source labels: {0:?}")]
    Mapping(Vec<i64>),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("voxel {index:?} is not covered by any patch")]
    Coverage { index: [usize; 3] },

    #[error("partition violated: {0}")]
    Partition(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value at step {step}: {what}")]
    Numeric { step: usize, what: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("orchestration error: {0}")]
    Orchestration(String),

    #[error("region error: {0}")]
    Region(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Format { .. } => "format",
            Error::Parameter(_) => "parameter",
            Error::Unit { .. } => "unit",
            Error::Mapping(_) => "mapping",
            Error::Sampling(_) => "sampling",
            Error::Coverage { .. } => "coverage",
            Error::Partition(_) => "partition",
            Error::Size(_) => "size",
            Error::Checkpoint(_) => "checkpoint",
            Error::Numeric { .. } => "numeric",
            Error::Config(_) => "config",
            Error::Orchestration(_) => "orchestration",
            Error::Region(_) => "region",
            Error::Pairing(_) => "pairing",
            Error::Report(_) => "report",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }
}
