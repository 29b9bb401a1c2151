use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("neighbors are not sorted by ascending distance")]
    UnsortedNeighbors,

    #[error("kNN masses cannot be normalized")]
    Degenerate,

    #[error("requested K={k} but the datastore holds only {available} entries")]
    NotEnoughEntries { k: usize, available: usize },

    #[error("bad magic bytes in {path:?}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: [u8; 4] },

    #[error("unsupported format version {found} in {path:?}")]
    UnsupportedVersion { path: PathBuf, found: u32 },

    #[error("file {path:?} is truncated")]
    Truncated { path: PathBuf },

    #[error("dimension mismatch in {path:?}: {detail}")]
    DimMismatch { path: PathBuf, detail: String },

    #[error("corrupt file {path:?}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing file {0:?}")]
    MissingFile(PathBuf),

    #[error("I/O error on {path:?}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
