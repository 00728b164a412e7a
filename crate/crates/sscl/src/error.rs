use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] sscl_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },

    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },

    #[error("config file {} not found", .0.display())]
    MissingConfig(PathBuf),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint was written under config {found}, the current config hashes to {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("checkpoint {}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{}: {reason}", path.display())]
    Manifest { path: PathBuf, reason: String },

    #[error("run directory {} is in use (lock file present)", .0.display())]
    Locked(PathBuf),

    #[error("{split} split was read during {stage}")]
    Leak { split: &'static str, stage: &'static str },

    #[error("{0}")]
    Invalid(String),
}

pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }
}

impl<T> IoContext<T> for Result<T, csv::Error> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| Error::Csv { path: path.to_path_buf(), source })
    }
}

impl<T> IoContext<T> for Result<T, image::ImageError> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}
