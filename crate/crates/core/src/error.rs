use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("nifti header field `magic`: expected \"n+1\\0\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("nifti header field `sizeof_hdr`: expected 348, found {0}")]
    BadHeaderSize(i32),

    #[error("nifti header field `datatype`: unsupported code {0}")]
    UnsupportedDatatype(i16),

    #[error("nifti data section truncated: expected {expected} bytes after vox_offset, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("nifti header field `dim[{index}]`: invalid value {value}")]
    InvalidDim { index: usize, value: i64 },

    #[error("dimension {0} exceeds the int16 range of the nifti-1 header")]
    DimOverflow(usize),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::RankDeficient(_) | Error::Singular(_) | Error::NotConverged { .. } => 3,
            _ => 2,
        }
    }
}
