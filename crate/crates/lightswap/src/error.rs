use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failures of the IO layer: core errors plus file access.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] lightswap_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    /// A core error raised while handling a particular file.
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: lightswap_core::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Error::Core(lightswap_core::Error::Usage(message.into()))
    }

    /// The core error, if any.
    pub fn core(&self) -> Option<&lightswap_core::Error> {
        match self {
            Error::Core(e) | Error::File { source: e, .. } => Some(e),
            Error::Io { .. } => None,
        }
    }

    /// Process exit status: 1 for misuse, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self.core() {
            Some(lightswap_core::Error::Usage(_)) => 1,
            _ => 2,
        }
    }
}

/// Attaches a path to core errors.
pub(crate) trait WithPath<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> WithPath<T> for lightswap_core::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| Error::File { path: path.to_path_buf(), source })
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temporary file and a rename, creating parent
/// directories, so readers never see partial files.
pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
