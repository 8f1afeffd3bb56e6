use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CganError, Result};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| CganError::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| CganError::Argument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| CganError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| CganError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CganError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CganError::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CganError::io(path, e))
}
