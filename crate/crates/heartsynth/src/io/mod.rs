//! On-disk formats: NIfTI volumes, JSONL manifests, checkpoint dirs.

pub mod checkpoint;
pub mod manifest;
pub mod nifti;

pub use checkpoint::{read_meta, sha256_file, sha256_hex, sha256_json, CheckpointDir, CheckpointError};
pub use manifest::{read_manifest, write_manifest, DatasetLayout, ManifestError, ManifestRecord, Split};
pub use nifti::{read_labels, read_volume, write_labels, write_labels_with_spacing, write_volume, NiftiError};
