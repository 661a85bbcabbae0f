use image::{ImageFormat, RgbImage};
use std::io::Cursor;
use std::path::{Path, PathBuf};

use super::types::{BackendError, ImageRef};
use crate::digest::sha256_fields;

/// Content id of raw RGB pixel data. Encoding-independent: two PNG files
/// with the same pixels share an id.
pub fn content_id(image: &RgbImage) -> String {
    sha256_fields([
        b"rgb8".as_slice(),
        &image.width().to_le_bytes(),
        &image.height().to_le_bytes(),
        image.as_raw(),
    ])
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, BackendError> {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| BackendError::Store(format!("png encode: {e}")))?;
    Ok(buf.into_inner())
}

/// Lossless image storage rooted at one directory. All `ImageRef` paths are
/// relative to that root.
#[derive(Debug, Clone)]
pub struct ImageStore {
    root: PathBuf,
}

impl ImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, image: &ImageRef) -> PathBuf {
        self.root.join(&image.storage_path)
    }

    /// Write `image` as PNG at `rel_path` and return its reference.
    pub fn put(&self, rel_path: &str, image: &RgbImage) -> Result<ImageRef, BackendError> {
        if image.width() == 0 || image.height() == 0 {
            return Err(BackendError::Validation("empty image".into()));
        }
        let path = self.root.join(rel_path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| BackendError::Store(format!("{}: {e}", parent.display())))?;
        }
        let bytes = encode_png(image)?;
        write_if_changed(&path, &bytes)
            .map_err(|e| BackendError::Store(format!("{}: {e}", path.display())))?;
        Ok(ImageRef {
            content_id: content_id(image),
            width: image.width(),
            height: image.height(),
            storage_path: rel_path.to_string(),
        })
    }

    pub fn load(&self, image: &ImageRef) -> Result<RgbImage, BackendError> {
        let path = self.resolve(image);
        let decoded = image::open(&path)
            .map_err(|e| BackendError::Store(format!("{}: {e}", path.display())))?;
        Ok(decoded.into_rgb8())
    }

    pub fn read_bytes(&self, image: &ImageRef) -> Result<Vec<u8>, BackendError> {
        let path = self.resolve(image);
        std::fs::read(&path).map_err(|e| BackendError::Store(format!("{}: {e}", path.display())))
    }

    pub fn exists(&self, image: &ImageRef) -> bool {
        self.resolve(image).is_file()
    }

    /// Load and re-hash; `Ok(false)` when the stored pixels drifted.
    pub fn verify(&self, image: &ImageRef) -> Result<bool, BackendError> {
        Ok(content_id(&self.load(image)?) == image.content_id)
    }

    /// Copy a stored image to another relative path, returning the new ref.
    pub fn copy_to(&self, image: &ImageRef, rel_path: &str) -> Result<ImageRef, BackendError> {
        if image.storage_path == rel_path {
            return Ok(image.clone());
        }
        let bytes = self.read_bytes(image)?;
        let dest = self.root.join(rel_path);
        if let Some(parent) = dest.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| BackendError::Store(format!("{}: {e}", parent.display())))?;
        }
        write_if_changed(&dest, &bytes)
            .map_err(|e| BackendError::Store(format!("{}: {e}", dest.display())))?;
        Ok(ImageRef {
            storage_path: rel_path.to_string(),
            ..image.clone()
        })
    }
}

/// Write bytes unless the file already holds exactly them.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> std::io::Result<bool> {
    if let Ok(existing) = std::fs::read(path) {
        if existing == bytes {
            return Ok(false);
        }
    }
    std::fs::write(path, bytes)?;
    Ok(true)
}
