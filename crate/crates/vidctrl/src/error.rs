use std::path::{Path, PathBuf};

/// Errors of the file formats and commands. Each kind maps to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("format: {0}")]
    Format(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] vidctrl_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub mod exit {
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const INTEGRITY: i32 = 4;
    pub const IO: i32 = 5;
    pub const RUNTIME: i32 = 1;
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// Process exit code. Corrupt files share the integrity code.
    pub fn exit_code(&self) -> i32 {
        use vidctrl_core::Error as C;
        match self {
            Self::Usage(_) | Self::Core(C::Argument(_)) => exit::USAGE,
            Self::Config(_) | Self::Core(C::Config(_)) => exit::CONFIG,
            Self::Integrity(_) | Self::Format(_) | Self::Core(C::Integrity(_)) => exit::INTEGRITY,
            Self::Io { .. } => exit::IO,
            Self::Core(C::Degenerate(_)) => exit::RUNTIME,
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
