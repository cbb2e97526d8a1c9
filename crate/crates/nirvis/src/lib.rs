//! Cross-spectral periocular verification toolkit.

pub mod descriptors;
pub mod error;
pub mod eval;
pub mod heads;
pub mod matching;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod translator;

pub use error::{Error, Result};

use std::fs;
use std::path::Path;

/// Write a file atomically: stage into a sibling temp file, then rename.
///
/// Readers never observe a half-written file, and an interrupted run leaves
/// the previous version intact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp = parent.join(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}
