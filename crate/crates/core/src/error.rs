use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate filter {filter}: all weights are zero")]
    DegenerateFilter { filter: usize },

    #[error("singular normalization: {0}")]
    Singular(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid network spec: {0}")]
    Spec(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged in phase `{phase}`: {detail}")]
    Training { phase: String, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },

    #[error("spec digest mismatch: file was written for a different network")]
    DigestMismatch,

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable single-word category used by the command line for machine-parseable failures.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::DegenerateFilter { .. } => "degenerate-filter",
            Error::Singular(_) => "singular",
            Error::Domain(_) => "domain",
            Error::Spec(_) => "spec",
            Error::Config(_) => "config",
            Error::Training { .. } => "training",
            Error::Dataset(_) => "dataset",
            Error::Format(_) => "format",
            Error::Crc { .. } => "crc",
            Error::DigestMismatch => "digest",
            Error::Io(_) => "io",
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
