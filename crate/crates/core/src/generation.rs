//! Candidate image sets per prompt, with a content-addressed generation cache
//! and optional row-major grid composition for inspection.

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::adapters::{BackendError, Backends, ImageRef, ImageStore, TextToImageBackend};
use crate::digest::sha256_fields;
use crate::promptgen::PromptRecord;

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("cache {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

impl Resolution {
    pub const fn square(side: u32) -> Self {
        Self {
            width: side,
            height: side,
        }
    }
}

/// The N candidates generated for one prompt, in generation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub prompt_id: String,
    pub n: u32,
    pub resolution: Resolution,
    pub content_ids: Vec<String>,
    pub images: Vec<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_ref: Option<ImageRef>,
    /// False when the backend failed part-way; such sets are excluded from
    /// judging.
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CandidateSet {
    fn new(prompt_id: &str, n: u32, resolution: Resolution, images: Vec<ImageRef>) -> Self {
        let complete = images.len() == n as usize;
        Self {
            prompt_id: prompt_id.to_string(),
            n,
            resolution,
            content_ids: images.iter().map(|r| r.content_id.clone()).collect(),
            images,
            grid_ref: None,
            complete,
            error: None,
        }
    }

    fn incomplete(
        prompt_id: &str,
        n: u32,
        resolution: Resolution,
        images: Vec<ImageRef>,
        error: String,
    ) -> Self {
        Self {
            complete: false,
            error: Some(error),
            ..Self::new(prompt_id, n, resolution, images)
        }
    }
}

/// Cache of finished candidate sets keyed by
/// `(prompt text, n, resolution, model id, run salt)`.
#[derive(Debug, Clone)]
pub struct GenerationCache {
    dir: PathBuf,
}

impl GenerationCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn key(prompt: &str, n: u32, resolution: Resolution, model_id: &str, salt: &str) -> String {
        sha256_fields([
            prompt.as_bytes(),
            &n.to_le_bytes(),
            &resolution.width.to_le_bytes(),
            &resolution.height.to_le_bytes(),
            model_id.as_bytes(),
            salt.as_bytes(),
        ])
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn lookup(&self, key: &str, store: &ImageStore) -> Option<Vec<ImageRef>> {
        let text = std::fs::read_to_string(self.entry_path(key)).ok()?;
        let refs: Vec<ImageRef> = serde_json::from_str(&text).ok()?;
        refs.iter().all(|r| store.exists(r)).then_some(refs)
    }

    fn insert(&self, key: &str, refs: &[ImageRef]) -> Result<(), GenerationError> {
        let path = self.entry_path(key);
        let err = |message: String| GenerationError::Cache {
            path: path.display().to_string(),
            message,
        };
        std::fs::create_dir_all(&self.dir).map_err(|e| err(e.to_string()))?;
        let body = serde_json::to_vec_pretty(refs).map_err(|e| err(e.to_string()))?;
        std::fs::write(&path, body).map_err(|e| err(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct GenerationRequest<'a> {
    pub n: u32,
    pub resolution: Resolution,
    pub salt: &'a str,
    /// Relative store directory receiving `<index>.png`.
    pub dest_dir: String,
}

/// Produce (or fetch from cache) the candidate set for one prompt. Backend
/// failures never abort: they yield an incomplete set.
pub fn generate_candidates(
    prompt: &PromptRecord,
    req: &GenerationRequest<'_>,
    backends: &Backends,
    backend: &dyn TextToImageBackend,
    cache: Option<&GenerationCache>,
) -> Result<CandidateSet, GenerationError> {
    if req.n == 0 {
        return Err(GenerationError::Argument("n must be >= 1".into()));
    }
    let key = GenerationCache::key(&prompt.text, req.n, req.resolution, backend.model_id(), req.salt);
    if let Some(refs) = cache.and_then(|c| c.lookup(&key, backends.store())) {
        let mut placed = Vec::with_capacity(refs.len());
        for (i, r) in refs.iter().enumerate() {
            placed.push(backends.store().copy_to(r, &format!("{}/{i}.png", req.dest_dir))?);
        }
        log::debug!("generation cache hit for {}", prompt.prompt_id);
        return Ok(CandidateSet::new(&prompt.prompt_id, req.n, req.resolution, placed));
    }
    match backends.generate_images_with(
        backend,
        &prompt.text,
        req.n,
        req.resolution.width,
        req.resolution.height,
        None,
        &req.dest_dir,
    ) {
        Ok(refs) => {
            if let Some(c) = cache {
                c.insert(&key, &refs)?;
            }
            Ok(CandidateSet::new(&prompt.prompt_id, req.n, req.resolution, refs))
        }
        Err(BackendError::Partial {
            completed, source, ..
        }) => {
            log::warn!("generation for {} incomplete: {source}", prompt.prompt_id);
            Ok(CandidateSet::incomplete(
                &prompt.prompt_id,
                req.n,
                req.resolution,
                completed,
                source.to_string(),
            ))
        }
        Err(other) => Err(other.into()),
    }
}

/// Tile the candidates row-major into one `(cols*w) x (rows*h)` image.
pub fn compose_grid(
    set: &CandidateSet,
    rows: u32,
    cols: u32,
    store: &ImageStore,
) -> Result<RgbImage, GenerationError> {
    if rows == 0 || cols == 0 || rows * cols != set.n {
        return Err(GenerationError::Argument(format!(
            "grid {rows}x{cols} does not hold {} candidates",
            set.n
        )));
    }
    if !set.complete || set.images.len() != set.n as usize {
        return Err(GenerationError::Argument(format!(
            "candidate set {} is incomplete",
            set.prompt_id
        )));
    }
    let Resolution { width, height } = set.resolution;
    let mut grid = RgbImage::new(cols * width, rows * height);
    for (k, r) in set.images.iter().enumerate() {
        let tile = store.load(r)?;
        if tile.dimensions() != (width, height) {
            return Err(GenerationError::Argument(format!(
                "candidate {k} is {}x{}, expected {width}x{height}",
                tile.width(),
                tile.height()
            )));
        }
        let (r_idx, c_idx) = (k as u32 / cols, k as u32 % cols);
        imageops::replace(&mut grid, &tile, (c_idx * width) as i64, (r_idx * height) as i64);
    }
    Ok(grid)
}

/// Compose the grid, persist it at `rel_path` and record it on the set.
pub fn attach_grid(
    set: &mut CandidateSet,
    rows: u32,
    cols: u32,
    store: &ImageStore,
    rel_path: &str,
) -> Result<ImageRef, GenerationError> {
    let grid = compose_grid(set, rows, cols, store)?;
    let r = store.put(rel_path, &grid)?;
    set.grid_ref = Some(r.clone());
    Ok(r)
}

/// Inverse of [`compose_grid`]: tiles in row-major order.
pub fn split_grid(grid: &RgbImage, rows: u32, cols: u32) -> Result<Vec<RgbImage>, GenerationError> {
    if rows == 0 || cols == 0 || !grid.width().is_multiple_of(cols) || !grid.height().is_multiple_of(rows) {
        return Err(GenerationError::Argument(format!(
            "{}x{} grid cannot split into {rows}x{cols}",
            grid.width(),
            grid.height()
        )));
    }
    let (w, h) = (grid.width() / cols, grid.height() / rows);
    Ok((0..rows * cols)
        .map(|k| {
            imageops::crop_imm(grid, (k % cols) * w, (k / cols) * h, w, h).to_image()
        })
        .collect())
}

/// Default grid shape for `n` candidates: `rows` rows when they divide `n`.
pub fn grid_shape(n: u32, rows: u32) -> Option<(u32, u32)> {
    (rows > 0 && n.is_multiple_of(rows)).then(|| (rows, n / rows))
}
