//! In-memory dataset loading shared by the training and evaluation stages.
//!
//! Every stage that consumes a dataset directory goes through [`load_dataset`]:
//! it reads the descriptor and manifest, loads each NIfTI exam, resamples it to
//! the descriptor grid, and returns `[1, D, H, W]` tensors with explicit pad
//! masks. Holding the whole corpus in RAM is deliberate — at the supported
//! sizes a few thousand exams fit comfortably, and it keeps the training
//! loops free of I/O jitter.

use std::path::Path;

use ndarray::Array4;
use thiserror::Error;

use crate::context::ContextVector;
use crate::io::manifest::{DatasetLayout, ManifestError, Split};
use crate::io::nifti::{self, NiftiError};
use crate::phantom::dataset::{read_descriptor, DatasetDescriptor, DatasetError};
use crate::phantom::preprocess::{preprocess, PreprocessError, PreprocessTarget, RawExam};
use crate::volume::SegmentationMask;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("manifest record {path} has no segmentation, which this stage requires")]
    MissingSeg { path: String },
}

/// One exam, resampled to the dataset grid and ready for a model.
#[derive(Debug, Clone)]
pub struct LoadedExam {
    /// `[1, D, H, W]` intensities in `[0, 1]`, padded slices included.
    pub data: Array4<f32>,
    /// `true` for acquired slices, `false` for depth padding.
    pub pad_mask: Vec<bool>,
    pub context: ContextVector,
    pub split: Split,
    pub subject_id: u64,
    pub frame: u32,
    /// Present only when loaded with `with_segs`.
    pub seg: Option<SegmentationMask>,
}

/// Loads and preprocesses every exam listed in the manifest under `root`.
///
/// Segmentations are optional on disk; pass `with_segs` only when the caller
/// actually needs them (label-based evaluation), so that purely generative
/// stages do not pay the extra memory.
pub fn load_dataset(
    root: &Path,
    with_segs: bool,
) -> Result<(DatasetDescriptor, Vec<LoadedExam>), DataError> {
    let desc = read_descriptor(root)?;
    let layout = DatasetLayout::new(root);
    let records = layout.read()?;
    let target = PreprocessTarget { dims: desc.dims, spacing: desc.spacing };
    let mut exams = Vec::with_capacity(records.len());
    for rec in &records {
        let (volume, spacing) = nifti::read_volume(&layout.resolve(&rec.path))?;
        let seg_path = rec
            .seg_path
            .as_ref()
            .ok_or_else(|| DataError::MissingSeg { path: rec.path.clone() })?;
        let seg = nifti::read_labels(&layout.resolve(seg_path))?;
        let raw = RawExam { volume, spacing, seg: Some(seg), real_depth: None };
        let (grid, seg) = preprocess(&raw, &target)?;
        let [d, h, w] = desc.dims;
        let data = grid.data.into_shape_with_order([1, d, h, w]).expect("grid matches dims");
        exams.push(LoadedExam {
            data,
            pad_mask: grid.pad_mask,
            context: rec.context.clone(),
            split: rec.split,
            subject_id: rec.subject_id,
            frame: rec.frame,
            seg: if with_segs { Some(seg) } else { None },
        });
    }
    Ok((desc, exams))
}

/// Indices of the exams belonging to `split`.
pub fn split_indices(exams: &[LoadedExam], split: Split) -> Vec<usize> {
    exams
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == split)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, DatasetGenSpec};

    #[test]
    fn loads_a_generated_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetGenSpec::desk(4, 11, true);
        generate_dataset(&spec, dir.path()).unwrap();
        let (desc, exams) = load_dataset(dir.path(), true).unwrap();
        assert_eq!(desc.n_subjects, 4);
        assert_eq!(exams.len(), 8, "two frames per subject");
        for e in &exams {
            assert_eq!(e.data.shape(), &[1, 7, 32, 32]);
            assert_eq!(e.pad_mask.len(), 7);
            assert!(e.pad_mask.iter().any(|&m| m));
            assert!(e.seg.is_some());
            let mx = e.data.iter().cloned().fold(f32::MIN, f32::max);
            assert!((0.0..=1.0).contains(&mx));
        }
        let train = split_indices(&exams, Split::Train);
        let val = split_indices(&exams, Split::Val);
        let test = split_indices(&exams, Split::Test);
        assert_eq!(train.len() + val.len() + test.len(), exams.len());
        assert!(!train.is_empty());
    }

    #[test]
    fn segs_skipped_when_not_requested() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&DatasetGenSpec::desk(3, 5, true), dir.path()).unwrap();
        let (_, exams) = load_dataset(dir.path(), false).unwrap();
        assert!(exams.iter().all(|e| e.seg.is_none()));
    }
}
