use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("numeric domain error in {op}: {detail}")]
    NumericDomain { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 8], found: [u8; 8] },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("index was built against model {index:016x} but model is {model:016x}")]
    StaleIndex { index: u64, model: u64 },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// Short stable tag, used by the command line for machine-readable errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::NumericDomain { .. } => "numeric",
            Error::Input(_) => "input",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::BadMagic { .. } => "bad-magic",
            Error::UnsupportedVersion { .. } => "bad-version",
            Error::Format(_) => "format",
            Error::StaleIndex { .. } => "stale-index",
            Error::Diverged { .. } => "diverged",
            Error::Io(e) if e.kind() == io::ErrorKind::UnexpectedEof => "truncated",
            Error::Io(e) if e.kind() == io::ErrorKind::NotFound => "missing-file",
            Error::Io(_) => "io",
        }
    }
}
