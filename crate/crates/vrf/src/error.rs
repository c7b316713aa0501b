use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("read failed: {0}")]
    Read(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected b\"VRF1\"")]
    BadMagic([u8; 4]),
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),
    #[error("dimensions overflow the addressable size")]
    DimsOverflow,
    #[error("unsupported rank {0} (expected 1 or 2)")]
    UnsupportedRank(u8),
    #[error("unsupported dtype code {0} (expected 1 = f32 or 2 = u32)")]
    UnsupportedDtype(u8),
    #[error("{0}")]
    Format(String),
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("duplicate split name `{0}`")]
    DuplicateSplit(String),
    #[error("no split named `{0}`")]
    MissingSplit(String),
    #[error("split `{split}`: {what} is {found}, expected {expected}")]
    DimensionMismatch {
        split: String,
        what: String,
        expected: u64,
        found: u64,
    },
    #[error(transparent)]
    Core(#[from] vrf_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("{}: {source}", path.display())]
    At { path: PathBuf, source: Box<Error> },
}

impl Error {
    /// Attaches a file path unless the error already carries one.
    pub fn at(self, path: &Path) -> Self {
        match self {
            e @ (Error::Io { .. } | Error::Json { .. } | Error::At { .. }) => e,
            e => Error::At {
                path: path.to_path_buf(),
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, without path context.
    pub fn root(&self) -> &Error {
        match self {
            Error::At { source, .. } => source.root(),
            e => e,
        }
    }

    /// 2 = usage or validation, 3 = data, 4 = internal.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Usage(_) | Error::Core(vrf_core::Error::InvalidParameter(_)) => 2,
            Error::Internal(_) => 4,
            _ => 3,
        }
    }
}
