use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::adapters::{write_if_changed, ImageStore};
use crate::detectfilter::OptimalPair;
use crate::digest::sha256_fields;

pub const METADATA_FILE: &str = "metadata.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("nothing to export")]
    Empty,
    #[error("missing image artifacts: {}", .0.join(", "))]
    MissingImages(Vec<String>),
    #[error("duplicate prompt_id {0} among pairs")]
    Duplicate(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid bundle: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExportError + '_ {
    move |e| ExportError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// One line of `metadata.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadataRecord {
    pub file_name: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetBundle {
    pub root: PathBuf,
    pub image_dir: PathBuf,
    pub metadata_path: PathBuf,
    pub pair_count: usize,
}

impl DatasetBundle {
    pub fn at(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            image_dir: root.join(IMAGE_DIR),
            metadata_path: root.join(METADATA_FILE),
            pair_count: 0,
        }
    }

    pub fn records(&self) -> Result<Vec<MetadataRecord>, ExportError> {
        let text = std::fs::read_to_string(&self.metadata_path).map_err(io_err(&self.metadata_path))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| ExportError::Invalid(e.to_string())))
            .collect()
    }

    /// Reopen an exported bundle, checking that every record's image exists
    /// and every caption is non-empty.
    pub fn open(root: &Path) -> Result<Self, ExportError> {
        let mut b = Self::at(root);
        let records = b.records()?;
        for r in &records {
            if r.text.trim().is_empty() {
                return Err(ExportError::Invalid(format!("{}: empty caption", r.file_name)));
            }
            if !root.join(&r.file_name).is_file() {
                return Err(ExportError::Invalid(format!("{} does not exist", r.file_name)));
            }
        }
        b.pair_count = records.len();
        Ok(b)
    }

    /// Digest over metadata and image bytes, in metadata order.
    pub fn digest(&self) -> Result<String, ExportError> {
        let meta = std::fs::read(&self.metadata_path).map_err(io_err(&self.metadata_path))?;
        let mut fields = vec![meta];
        for r in self.records()? {
            let p = self.root.join(&r.file_name);
            fields.push(r.file_name.into_bytes());
            fields.push(std::fs::read(&p).map_err(io_err(&p))?);
        }
        Ok(sha256_fields(fields))
    }
}

/// Copy each pair's image byte-for-byte to `images/<prompt_id>.png` and write
/// one metadata record per pair, sorted by prompt_id. Files are only
/// rewritten when their bytes change, and stale images are removed.
pub fn export_pairs(
    pairs: &[OptimalPair],
    store: &ImageStore,
    root: &Path,
) -> Result<DatasetBundle, ExportError> {
    if pairs.is_empty() {
        return Err(ExportError::Empty);
    }
    let missing: Vec<String> = pairs
        .iter()
        .filter(|p| !store.exists(&p.image))
        .map(|p| p.image.content_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(ExportError::MissingImages(missing));
    }
    let mut sorted: Vec<&OptimalPair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
    let mut names = BTreeSet::new();
    for p in &sorted {
        if !names.insert(format!("{}.png", p.prompt_id)) {
            return Err(ExportError::Duplicate(p.prompt_id.clone()));
        }
    }

    let bundle = DatasetBundle {
        pair_count: sorted.len(),
        ..DatasetBundle::at(root)
    };
    std::fs::create_dir_all(&bundle.image_dir).map_err(io_err(&bundle.image_dir))?;
    let mut meta = Vec::new();
    for p in &sorted {
        let file_name = format!("{IMAGE_DIR}/{}.png", p.prompt_id);
        let bytes = store.read_bytes(&p.image).map_err(|e| ExportError::Io {
            path: p.image.storage_path.clone(),
            message: e.to_string(),
        })?;
        let dest = root.join(&file_name);
        write_if_changed(&dest, &bytes).map_err(io_err(&dest))?;
        let line = serde_json::to_string(&MetadataRecord {
            file_name,
            text: p.prompt_text.clone(),
        })
        .expect("metadata serializes");
        writeln!(meta, "{line}").expect("write to Vec");
    }
    write_if_changed(&bundle.metadata_path, &meta).map_err(io_err(&bundle.metadata_path))?;

    for entry in std::fs::read_dir(&bundle.image_dir).map_err(io_err(&bundle.image_dir))? {
        let entry = entry.map_err(io_err(&bundle.image_dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !names.contains(&name) {
            std::fs::remove_file(entry.path()).map_err(io_err(&entry.path()))?;
        }
    }
    Ok(bundle)
}
