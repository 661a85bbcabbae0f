//! Fine-tuning dataset export and the per-run stage manifest.

mod bundle;
mod manifest;

pub use bundle::{export_pairs, DatasetBundle, ExportError, MetadataRecord, IMAGE_DIR, METADATA_FILE};
pub use manifest::{
    update_manifest, Counters, ManifestError, RunManifest, Stage, StageDigests, StageRecord,
    StageStatus,
};
