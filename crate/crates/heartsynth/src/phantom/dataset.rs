//! Whole-dataset generation: sample subject attributes from the
//! population statistics, rasterize ED and ES frames, and write volumes,
//! segmentations, and the JSONL manifest under one root with a
//! `dataset.json` descriptor carrying the public/private flag.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextVector, Phase};
use crate::io::manifest::{DatasetLayout, ManifestError, ManifestRecord, Split};
use crate::io::nifti::{self, NiftiError};
use crate::phantom::generator::{generate_phantom, PhantomError, PhantomSpec, TextureStyle};
use crate::volume::Spacing;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("phantom: {0}")]
    Phantom(#[from] PhantomError),
    #[error("nifti: {0}")]
    Nifti(#[from] NiftiError),
    #[error("manifest: {0}")]
    Manifest(#[from] ManifestError),
    #[error("descriptor: {0}")]
    Descriptor(#[from] serde_json::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("need at least 3 subjects, got {0}")]
    TooFewSubjects(usize),
}

/// Attribute redraws allowed per subject before an unrealizable-anatomy
/// rejection is treated as fatal.
const MAX_SUBJECT_REDRAWS: usize = 64;

/// What to generate and where it sits on the public/private divide.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetGenSpec {
    pub n_subjects: usize,
    pub dims: [usize; 3],
    pub spacing: Spacing,
    pub seed: u64,
    /// Public datasets are eligible for compressor training and
    /// pre-training; private ones only for DP fine-tuning.
    pub public: bool,
    /// (train, val) fractions; the remainder is test.
    pub split_fracs: (f64, f64),
    /// Defaults to the preset matching `public` when absent.
    pub texture: Option<TextureStyle>,
}

impl DatasetGenSpec {
    pub fn desk(n_subjects: usize, seed: u64, public: bool) -> Self {
        Self {
            n_subjects,
            dims: [7, 32, 32],
            spacing: [130.0 / 7.0, 175.38 / 32.0, 175.38 / 32.0],
            seed,
            public,
            split_fracs: (0.8, 0.1),
            texture: None,
        }
    }
}

/// Root-level descriptor; the `public` flag here is what the composition
/// policy checks against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub public: bool,
    pub dims: [usize; 3],
    pub spacing: Spacing,
    pub n_subjects: usize,
    pub seed: u64,
    pub texture: TextureStyle,
}

pub fn read_descriptor(root: &Path) -> Result<DatasetDescriptor, DatasetError> {
    let p = root.join("dataset.json");
    let s = std::fs::read_to_string(&p)
        .map_err(|e| DatasetError::Io { path: p.display().to_string(), source: e })?;
    Ok(serde_json::from_str(&s)?)
}

/// Draws from a normal, redrawing until inside `[lo, hi]`.
fn truncated(rng: &mut ChaCha8Rng, mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    let dist = Normal::new(mean, std).expect("std > 0");
    for _ in 0..1000 {
        let v = dist.sample(rng);
        if (lo..=hi).contains(&v) {
            return v;
        }
    }
    mean.clamp(lo, hi)
}

/// Samples one subject's attributes. Public cohorts get systematically
/// smaller hearts — a deliberate covariate shift so pre-training and
/// fine-tuning see genuinely different distributions.
fn sample_subject(rng: &mut ChaCha8Rng, dims: [usize; 3], public: bool) -> ContextVector {
    let vol_scale = if public { 0.88 } else { 1.0 };
    let d = dims[0] as f64;
    let mut c = ContextVector::zeroed();
    c.age = truncated(rng, 54.88, 7.58, 30.0, 80.0);
    c.sex = if rng.random_range(0.0..1.0) < 0.48 { 1.0 } else { 0.0 };
    c.bmi = truncated(rng, 26.52, 4.39, 17.0, 40.0);
    c.angle = truncated(rng, -0.14, 26.12, -60.0, 60.0);
    let depth_mean = 10.82 * d / 13.0;
    let depth_std = 1.19 * d / 13.0;
    let depth_lo = (0.7 * d).round().max(3.0);
    c.depth = truncated(rng, depth_mean, depth_std, depth_lo, d).round();
    c.lv_ed_vol = truncated(rng, 155.70 * vol_scale, 37.13, 90.0, 220.0);
    c.lv_ef = truncated(rng, 57.22, 6.39, 38.0, 72.0);
    c.lv_es_vol = c.lv_ed_vol * (1.0 - c.lv_ef / 100.0);
    // RV space is what the crescent leaves around the LV shell, so its
    // draw is capped both absolutely and relative to the LV.
    let rv_hi = 190.0_f64.min(1.3 * c.lv_ed_vol);
    c.rv_ed_vol = truncated(rng, 146.90 * vol_scale, 33.82, 85.0, rv_hi);
    c.rv_ef = truncated(rng, 59.55, 6.25, 38.0, 72.0);
    c.rv_es_vol = c.rv_ed_vol * (1.0 - c.rv_ef / 100.0);
    c.myo_ed_thickness = truncated(rng, 5.70, 0.78, 3.8, 7.8);
    c.myo_es_thickness = truncated(rng, 8.86, 1.21, 6.0, 11.8);
    c
}

/// Generates the dataset under `root` and returns the manifest records.
pub fn generate_dataset(
    spec: &DatasetGenSpec,
    root: &Path,
) -> Result<Vec<ManifestRecord>, DatasetError> {
    if spec.n_subjects < 3 {
        return Err(DatasetError::TooFewSubjects(spec.n_subjects));
    }
    let texture = spec.texture.unwrap_or(if spec.public {
        TextureStyle::public_default()
    } else {
        TextureStyle::private_default()
    });
    let layout = DatasetLayout::new(root);
    std::fs::create_dir_all(root)
        .map_err(|e| DatasetError::Io { path: root.display().to_string(), source: e })?;

    let n_train = (spec.n_subjects as f64 * spec.split_fracs.0).floor() as usize;
    let n_val = (spec.n_subjects as f64 * spec.split_fracs.1).ceil() as usize;
    let mut records = Vec::with_capacity(spec.n_subjects * 2);
    for subj in 0..spec.n_subjects {
        let mut rng =
            ChaCha8Rng::seed_from_u64(spec.seed ^ (subj as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let split = if subj < n_train {
            Split::Train
        } else if subj < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        // The attribute prior is grid-agnostic, so on small fields of view
        // a draw can ask for anatomy that physically cannot fit (most often
        // a large RV). Such subjects are redrawn — effectively truncating
        // the prior at what the grid can realize — with a bound so a
        // hopelessly mis-sized grid still surfaces the original error.
        let mut frames = None;
        let mut last_unrealizable = None;
        for _attempt in 0..MAX_SUBJECT_REDRAWS {
            let ctx = sample_subject(&mut rng, spec.dims, spec.public);
            let mut built = Vec::with_capacity(2);
            let mut rejected = None;
            for (frame, phase) in [(0u32, Phase::Ed), (1u32, Phase::Es)] {
                let mut fctx = ctx;
                fctx.phase = phase.as_f64();
                let pspec = PhantomSpec {
                    context: fctx,
                    seed: spec.seed ^ ((subj as u64) << 8) ^ frame as u64,
                    dims: spec.dims,
                    spacing: spec.spacing,
                    texture,
                };
                match generate_phantom(&pspec) {
                    Ok((vol, mask, _)) => built.push((frame, fctx, vol, mask)),
                    Err(e @ PhantomError::UnrealizableAnatomy { .. }) => {
                        rejected = Some(e);
                        break;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            match rejected {
                None => {
                    frames = Some(built);
                    break;
                }
                Some(e) => last_unrealizable = Some(e),
            }
        }
        let Some(frames) = frames else {
            return Err(last_unrealizable.expect("at least one redraw attempt ran").into());
        };
        for (frame, fctx, vol, mask) in frames {
            let real_d = vol.real_depth();
            // Persist only real slices; preprocessing re-pads.
            let raw_vol = vol.data.slice(ndarray::s![..real_d, .., ..]).to_owned();
            let raw_seg = mask.labels.slice(ndarray::s![..real_d, .., ..]).to_owned();
            let vol_rel = DatasetLayout::volume_rel(split, subj as u64, frame);
            let seg_rel = DatasetLayout::seg_rel(split, subj as u64, frame);
            nifti::write_volume(&layout.resolve(&vol_rel), &raw_vol, spec.spacing)?;
            nifti::write_labels_with_spacing(&layout.resolve(&seg_rel), &raw_seg, spec.spacing)?;
            records.push(ManifestRecord {
                path: vol_rel,
                seg_path: Some(seg_rel),
                split,
                subject_id: subj as u64,
                frame,
                context: fctx,
            });
        }
    }
    layout.write(&records)?;
    let descriptor = DatasetDescriptor {
        public: spec.public,
        dims: spec.dims,
        spacing: spec.spacing,
        n_subjects: spec.n_subjects,
        seed: spec.seed,
        texture,
    };
    let dp = root.join("dataset.json");
    std::fs::write(&dp, serde_json::to_string_pretty(&descriptor)?)
        .map_err(|e| DatasetError::Io { path: dp.display().to_string(), source: e })?;
    Ok(records)
}
