use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("data: {0}")]
    Data(String),
    #[error("malformed file at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Error::Shape { op, detail }
    }
}
