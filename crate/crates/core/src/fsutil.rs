use std::path::Path;

use serde::Serialize;

use crate::error::{Result, SsipError};

/// Pretty JSON with a trailing newline.
pub(crate) fn write_json_pretty<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| SsipError::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| SsipError::io(path, e))
}

pub(crate) fn create_dir_all(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| SsipError::io(path, e))
}
