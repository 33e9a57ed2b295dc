//! Image folders for training.

use std::path::{Path, PathBuf};

use pgs_core::ImageTensor;

use crate::error::{PgsError, Result};
use crate::imageio::load_square;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Image files directly inside `dir`, sorted by name.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| PgsError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| PgsError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Every image of `dir` as a `side × side` square; at least `min_count` are required.
pub fn load_dir(dir: &Path, side: u32, min_count: usize) -> Result<Vec<ImageTensor>> {
    let files = image_files(dir)?;
    if files.len() < min_count.max(1) {
        return Err(PgsError::Data(format!(
            "{} holds {} image(s) (png/jpg), at least {} needed",
            dir.display(),
            files.len(),
            min_count.max(1)
        )));
    }
    files.iter().map(|f| load_square(f, side)).collect()
}
