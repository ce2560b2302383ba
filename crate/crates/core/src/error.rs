//! Error type shared across the toolkit.
//!
//! Every fallible operation returns [`Error`]. The CLI maps each variant to a
//! stable category string (`io`, `format`, `shape`, `config`, `data`,
//! `numeric`) so scripted callers can dispatch on `ERROR:<category>:` lines
//! without parsing free-form messages.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Header bytes do not form a valid NIfTI-1 header in either byte order.
    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),

    /// Header parsed, but the on-disk datatype code is not one we read.
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    /// Input is a gzip stream; this reader only handles uncompressed .nii.
    #[error("compressed NIfTI input is not supported; decompress to .nii first")]
    CompressedInput,

    /// dim[0] outside 1..=7, or a non-positive extent where one is required.
    #[error("invalid NIfTI dimensions: {0}")]
    InvalidDimensions(String),

    /// Magic bytes of a toolkit container (RVOL / UNCK) did not match.
    #[error("bad magic in {kind} file (expected {expected:?})")]
    BadMagic { kind: &'static str, expected: &'static str },

    #[error("unsupported {kind} container version {found}")]
    UnsupportedVersion { kind: &'static str, found: u32 },

    #[error("truncated {kind} payload: {detail}")]
    Truncated { kind: &'static str, detail: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A loss, gradient, or parameter became NaN/inf where finiteness is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    /// Stable category tag used in CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::MalformedHeader(_)
            | Error::UnsupportedDatatype(_)
            | Error::CompressedInput
            | Error::InvalidDimensions(_)
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. } => "format",
            Error::ShapeMismatch(_) => "shape",
            Error::InvalidConfig(_) => "config",
            Error::InvalidData(_) => "data",
            Error::NonFinite(_) => "numeric",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_are_stable() {
        assert_eq!(Error::CompressedInput.category(), "format");
        assert_eq!(Error::ShapeMismatch("x".into()).category(), "shape");
        assert_eq!(Error::NonFinite("loss".into()).category(), "numeric");
        assert_eq!(
            Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "gone")).category(),
            "io"
        );
    }
}
