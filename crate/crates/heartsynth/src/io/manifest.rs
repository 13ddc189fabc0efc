//! JSONL dataset manifests.
//!
//! One record per exam frame: the volume path (relative to the dataset
//! root), an optional segmentation path, the split, and the fourteen
//! conditioning attributes as flat keys. Line order is the dataset order;
//! loaders must not re-sort, so shuffles stay under seed control.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::ContextVector;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("serialize: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("unknown split {0:?} (expected train, val, or test)")]
    UnknownSplit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One manifest line. `context` flattens to the attribute keys so the
/// JSONL stays greppable by attribute name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_path: Option<String>,
    pub split: Split,
    /// Identifies the subject so frames of one exam stay in one split.
    pub subject_id: u64,
    /// Frame index within the cine sequence (0 = ED frame).
    pub frame: u32,
    #[serde(flatten)]
    pub context: ContextVector,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), ManifestError> {
    let io = |e: std::io::Error| ManifestError::Io { path: path.display().to_string(), source: e };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for rec in records {
        let line = serde_json::to_string(rec)?;
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, ManifestError> {
    let io = |e: std::io::Error| ManifestError::Io { path: path.display().to_string(), source: e };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| ManifestError::Parse { line: i + 1, source: e })?;
        records.push(rec);
    }
    Ok(records)
}

/// A dataset directory: `<root>/manifest.jsonl` plus per-split volume dirs.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    pub fn resolve(&self, rec_path: &str) -> PathBuf {
        self.root.join(rec_path)
    }

    /// Relative volume path for one frame of one subject.
    pub fn volume_rel(split: Split, subject_id: u64, frame: u32) -> String {
        format!("{}/subj{subject_id:05}_f{frame:02}.nii.gz", split.dir_name())
    }

    pub fn seg_rel(split: Split, subject_id: u64, frame: u32) -> String {
        format!("{}/subj{subject_id:05}_f{frame:02}_seg.nii.gz", split.dir_name())
    }

    pub fn read(&self) -> Result<Vec<ManifestRecord>, ManifestError> {
        read_manifest(&self.manifest_path())
    }

    pub fn write(&self, records: &[ManifestRecord]) -> Result<(), ManifestError> {
        write_manifest(&self.manifest_path(), records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::Phase;

    fn record() -> ManifestRecord {
        let mut ctx = ContextVector::zeroed();
        ctx.age = 54.0;
        ctx.sex = 1.0;
        ctx.phase = Phase::Ed.as_f64();
        ctx.lv_ed_vol = 150.0;
        ctx.lv_es_vol = 60.0;
        ctx.lv_ef = ContextVector::ef_from_volumes(150.0, 60.0);
        ctx.rv_ed_vol = 140.0;
        ctx.rv_es_vol = 70.0;
        ctx.rv_ef = ContextVector::ef_from_volumes(140.0, 70.0);
        ManifestRecord {
            path: DatasetLayout::volume_rel(Split::Train, 7, 0),
            seg_path: Some(DatasetLayout::seg_rel(Split::Train, 7, 0)),
            split: Split::Train,
            subject_id: 7,
            frame: 0,
            context: ctx,
        }
    }

    #[test]
    fn round_trip_preserves_order_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let layout = DatasetLayout::new(dir.path());
        let mut a = record();
        let mut b = record();
        b.subject_id = 9;
        b.path = DatasetLayout::volume_rel(Split::Val, 9, 3);
        b.split = Split::Val;
        a.context.bmi = 22.5;
        layout.write(&[a.clone(), b.clone()]).unwrap();
        let back = layout.read().unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].subject_id, 7);
        assert_eq!(back[1].subject_id, 9);
        assert_eq!(back[0].context.bmi, 22.5);
        assert_eq!(back[1].split, Split::Val);
    }

    #[test]
    fn attribute_keys_are_flat() {
        let line = serde_json::to_string(&record()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert!(v.get("lv_ed_vol").is_some());
        assert!(v.get("myo_es_thickness").is_some());
        assert!(v.get("context").is_none());
    }

    #[test]
    fn bad_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(&path, "{\"not\": \"a record\"}\n").unwrap();
        match read_manifest(&path) {
            Err(ManifestError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
