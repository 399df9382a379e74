//! File formats: checkpoints, PPM images, flow fields, scene documents,
//! run configs and the style cache.

pub mod checkpoint;
pub mod config;
pub mod flowfile;
pub mod model_file;
pub mod ppm;
pub mod report;
pub mod scene_file;
pub mod style_cache;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use checkpoint::Entry;
pub use config::RunConfig;
pub use model_file::{load_model, save_model};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs { path: PathBuf, source: std::io::Error },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: &'static str, found: Vec<u8> },
    #[error("unsupported version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("CRC mismatch at offset {offset}: stored {stored:08x}, computed {computed:08x}")]
    Crc { offset: usize, stored: u32, computed: u32 },
    #[error("truncated at offset {offset} reading {what}: expected {expected} bytes, {actual} available")]
    Truncated { offset: usize, what: String, expected: usize, actual: usize },
    #[error("malformed data at offset {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("missing field `{0}`")]
    Missing(String),
    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|source| IoError::Fs { path: path.to_path_buf(), source })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| IoError::Fs { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, bytes).map_err(|source| IoError::Fs { path: path.to_path_buf(), source })
}
