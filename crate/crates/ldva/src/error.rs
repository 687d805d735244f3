use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    /// `field` is the dotted path inside the document, empty at top level.
    #[error("{}: at `{field}`: {detail}", path.display())]
    Config { path: PathBuf, field: String, detail: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ldva_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }

    /// Process exit status: 2 for anything the caller can fix by changing
    /// arguments, config or inputs, 1 for failures during a valid run.
    pub fn exit_code(&self) -> u8 {
        use ldva_core::Error as C;
        match self {
            Error::Core(C::Config(_) | C::Invalid(_) | C::Data(_) | C::Format { .. }) => 2,
            Error::Core(_) => 1,
            _ => 2,
        }
    }
}

pub(crate) fn read(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
