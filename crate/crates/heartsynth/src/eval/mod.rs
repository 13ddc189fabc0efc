//! The four-metric evaluation suite.
//!
//! A synthetic set is scored against a real reference on four axes:
//! realism (Fréchet distance between feature-set Gaussians), diversity
//! (mean MS-SSIM over random pairs — lower is more diverse), phase
//! fidelity (CPA: fraction of volumes classified into their conditioned
//! cardiac phase), and anatomical fidelity (CSC: correlation between
//! conditioned attributes and anatomy measured off a segmentation).
//!
//! [`evaluate`] computes whatever the inputs allow and records every
//! per-metric failure in the report instead of aborting the rest, so a
//! missing probe checkpoint still yields FID and MS-SSIM. Reports carry
//! the fingerprints of every model involved — scores are only comparable
//! when those match.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::context::{ContextError, ContextVector};
use crate::data::{load_dataset, split_indices, DataError};
use crate::io::checkpoint::CheckpointError;
use crate::io::manifest::Split;
use crate::io::nifti::{self, NiftiError};
use crate::phantom::oracle_measure;
use crate::sampler::{read_sample_manifest, SamplerError};
use crate::volume::{VolumeError, VolumeGrid};

pub mod csc;
pub mod features;
pub mod ms_ssim;
pub mod phase;
pub mod segmenter;

pub use csc::{csc_from_masks, csc_from_measurements, pearson, CscReport};
pub use features::{
    central_slices, extract_features, frechet_distance, FeatureSet, SliceEmbedder,
    CENTRAL_SLICES, EXTRACTOR_CONV32,
};
pub use ms_ssim::{ms_ssim_diversity, ms_ssim_pair};
pub use phase::{
    classify_phase, classify_volumes, cpa, load_phase_classifier, train_phase_classifier,
    PhaseMeta, PhaseNet, PhaseTrainOpts,
};
pub use segmenter::{
    load_segmenter, mean_dice, segment, segment_volumes, train_segmenter, SegMeta, SegNet,
    SegTrainOpts,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("volume has {depth} slices; this metric needs {needed}")]
    TooShallow { depth: usize, needed: usize },
    #[error("no extractor registered under `{0}`")]
    UnknownExtractor(String),
    #[error("feature sets come from different extractors: {left} vs {right}")]
    ExtractorMismatch { left: String, right: String },
    #[error("{have} volumes where at least {need} are needed")]
    TooFewVolumes { have: usize, need: usize },
    #[error("slice size {size} is below the {min} minimum for the scale pyramid")]
    TooSmallForPyramid { size: usize, min: usize },
    #[error("covariance is numerically indefinite (eigenvalue {min_eig:e})")]
    DegenerateCovariance { min_eig: f64 },
    #[error("volume shapes differ: {left:?} vs {right:?}")]
    VolumeShapeMismatch { left: [usize; 3], right: [usize; 3] },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("{side} vector has zero variance; correlation undefined")]
    ZeroVariance { side: &'static str },
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("checkpoint does not fit this model: {0}")]
    BadCheckpoint(String),
    #[error("{dir} has neither a sample manifest nor a dataset descriptor")]
    NoManifest { dir: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serializing metrics: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Bumped whenever the report layout changes shape.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedPairs {
    pub lv: usize,
    pub rv: usize,
    pub myo: usize,
}

/// Everything one evaluation run produced. Metrics that could not be
/// computed are absent, with the reason recorded in `errors`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub n_real: usize,
    pub n_synth: usize,
    pub fid: Option<f64>,
    /// Mean pairwise MS-SSIM of the synthetic set (lower = more diverse).
    pub ms_ssim: Option<f64>,
    /// Same statistic on the real reference, the anchor to compare against.
    pub ms_ssim_real: Option<f64>,
    pub cpa: Option<f64>,
    pub csc_lv: Option<f64>,
    pub csc_rv: Option<f64>,
    pub csc_myo: Option<f64>,
    pub dropped_pairs: DroppedPairs,
    pub extractor: Option<String>,
    pub phase_classifier: Option<String>,
    pub segmenter: Option<String>,
    pub phase_held_out_accuracy: Option<f64>,
    pub seg_held_out_dice: Option<f64>,
    pub errors: Vec<String>,
}

impl MetricsReport {
    fn skeleton() -> Self {
        Self {
            schema_version: METRICS_SCHEMA_VERSION,
            n_real: 0,
            n_synth: 0,
            fid: None,
            ms_ssim: None,
            ms_ssim_real: None,
            cpa: None,
            csc_lv: None,
            csc_rv: None,
            csc_myo: None,
            dropped_pairs: DroppedPairs::default(),
            extractor: None,
            phase_classifier: None,
            segmenter: None,
            phase_held_out_accuracy: None,
            seg_held_out_dice: None,
            errors: Vec::new(),
        }
    }

    /// True when every metric was computed.
    pub fn complete(&self) -> bool {
        self.errors.is_empty()
            && self.fid.is_some()
            && self.ms_ssim.is_some()
            && self.cpa.is_some()
            && self.csc_lv.is_some()
            && self.csc_rv.is_some()
            && self.csc_myo.is_some()
    }
}

pub fn write_metrics(report: &MetricsReport, path: &Path) -> Result<(), EvalError> {
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(path, json)
        .map_err(|e| EvalError::Io { path: path.display().to_string(), source: e })
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport, EvalError> {
    let s = std::fs::read_to_string(path)
        .map_err(|e| EvalError::Io { path: path.display().to_string(), source: e })?;
    Ok(serde_json::from_str(&s)?)
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Registry name of the feature extractor used for the FID.
    pub extractor: String,
    /// Random pairs scored by the MS-SSIM diversity estimate.
    pub pair_count: usize,
    /// Central slices metrics look at.
    pub central_k: usize,
    /// Seeds the pair sampling; everything else is deterministic.
    pub seed: u64,
    pub phase_ckpt: Option<PathBuf>,
    pub seg_ckpt: Option<PathBuf>,
}

impl EvalConfig {
    pub fn desk_scale() -> Self {
        Self {
            extractor: EXTRACTOR_CONV32.to_string(),
            pair_count: 100,
            central_k: CENTRAL_SLICES,
            seed: 0xE7A1,
            phase_ckpt: None,
            seg_ckpt: None,
        }
    }
}

fn grids_and_contexts(
    root: &Path,
) -> Result<(Vec<VolumeGrid>, Vec<ContextVector>), EvalError> {
    let (desc, exams) = load_dataset(root, false)?;
    let mut idx = split_indices(&exams, Split::Test);
    if idx.is_empty() {
        idx = (0..exams.len()).collect();
    }
    let mut vols = Vec::with_capacity(idx.len());
    let mut ctxs = Vec::with_capacity(idx.len());
    for i in idx {
        let e = &exams[i];
        let data = e
            .data
            .clone()
            .into_shape_with_order([desc.dims[0], desc.dims[1], desc.dims[2]])
            .expect("exam matches dataset dims");
        vols.push(VolumeGrid::new(data, desc.spacing, e.pad_mask.clone())?);
        ctxs.push(e.context);
    }
    Ok((vols, ctxs))
}

/// Reference side: the test split of a dataset directory (all exams when
/// the test split is empty).
pub fn load_reference(root: &Path) -> Result<(Vec<VolumeGrid>, Vec<ContextVector>), EvalError> {
    grids_and_contexts(root)
}

/// Candidate side: a sampler output directory (`manifest.jsonl` plus
/// volumes), or another dataset directory — identified by `dataset.json`
/// — to allow self-evaluation and real-vs-real baselines.
pub fn load_candidates(dir: &Path) -> Result<(Vec<VolumeGrid>, Vec<ContextVector>), EvalError> {
    if dir.join("dataset.json").is_file() {
        return grids_and_contexts(dir);
    }
    let manifest = dir.join("manifest.jsonl");
    if !manifest.is_file() {
        return Err(EvalError::NoManifest { dir: dir.display().to_string() });
    }
    let (_header, rows) = read_sample_manifest(&manifest)?;
    let mut vols = Vec::with_capacity(rows.len());
    let mut ctxs = Vec::with_capacity(rows.len());
    for row in rows {
        let (data, spacing) = nifti::read_volume(&dir.join(&row.path))?;
        vols.push(VolumeGrid::all_real(data, spacing)?);
        ctxs.push(row.context);
    }
    Ok((vols, ctxs))
}

/// Scores `synth_dir` against the reference in `real_root`.
///
/// Fails hard only when the reference itself is unusable; everything on
/// the candidate side degrades into `errors` entries so the remaining
/// metrics still land.
pub fn evaluate(
    real_root: &Path,
    synth_dir: &Path,
    cfg: &EvalConfig,
) -> Result<MetricsReport, EvalError> {
    let (real_vols, _real_ctx) = load_reference(real_root)?;
    let mut report = MetricsReport::skeleton();
    report.n_real = real_vols.len();

    let synth = match load_candidates(synth_dir) {
        Ok(pair) => Some(pair),
        Err(e) => {
            report.errors.push(format!("loading synthetic volumes: {e}"));
            None
        }
    };

    // Real-side diversity baseline is useful even when the candidate side
    // failed to load.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match ms_ssim_diversity(&real_vols, cfg.pair_count, cfg.central_k, &mut rng) {
        Ok(v) => report.ms_ssim_real = Some(v),
        Err(e) => report.errors.push(format!("ms-ssim (real baseline): {e}")),
    }

    let Some((synth_vols, synth_ctx)) = synth else {
        return Ok(report);
    };
    report.n_synth = synth_vols.len();

    match extract_features(&real_vols, &cfg.extractor, cfg.central_k).and_then(|fa| {
        let fb = extract_features(&synth_vols, &cfg.extractor, cfg.central_k)?;
        report.extractor = Some(fa.extractor.clone());
        frechet_distance(&fa, &fb)
    }) {
        Ok(v) => report.fid = Some(v),
        Err(e) => report.errors.push(format!("fid: {e}")),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match ms_ssim_diversity(&synth_vols, cfg.pair_count, cfg.central_k, &mut rng) {
        Ok(v) => report.ms_ssim = Some(v),
        Err(e) => report.errors.push(format!("ms-ssim: {e}")),
    }

    match &cfg.phase_ckpt {
        Some(dir) => match load_phase_classifier(dir) {
            Ok((net, ps, meta)) => {
                report.phase_classifier = Some(meta.fingerprint.clone());
                report.phase_held_out_accuracy = Some(meta.held_out_accuracy);
                let preds = classify_volumes(&net, &ps, &synth_vols);
                match cpa(&preds, &synth_ctx) {
                    Ok(v) => report.cpa = Some(v),
                    Err(e) => report.errors.push(format!("cpa: {e}")),
                }
            }
            Err(e) => report.errors.push(format!("cpa: {e}")),
        },
        None => report.errors.push("cpa: no phase classifier checkpoint configured".into()),
    }

    match &cfg.seg_ckpt {
        Some(dir) => match load_segmenter(dir) {
            Ok((net, ps, meta)) => {
                report.segmenter = Some(meta.fingerprint.clone());
                report.seg_held_out_dice = Some(meta.held_out_dice);
                let masks = segment_volumes(&net, &ps, &synth_vols);
                let measurements: Vec<_> = masks
                    .iter()
                    .zip(&synth_vols)
                    .map(|(m, v)| oracle_measure(m, v.spacing))
                    .collect();
                match csc_from_measurements(&measurements, &synth_ctx) {
                    Ok(rep) => {
                        report.csc_lv = rep.lv;
                        report.csc_rv = rep.rv;
                        report.csc_myo = rep.myo;
                        report.dropped_pairs = DroppedPairs {
                            lv: rep.dropped_lv,
                            rv: rep.dropped_rv,
                            myo: rep.dropped_myo,
                        };
                        for note in rep.notes {
                            report.errors.push(format!("csc: {note}"));
                        }
                    }
                    Err(e) => report.errors.push(format!("csc: {e}")),
                }
            }
            Err(e) => report.errors.push(format!("csc: {e}")),
        },
        None => report.errors.push("csc: no segmenter checkpoint configured".into()),
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, DatasetGenSpec};
    use tempfile::tempdir;

    #[test]
    fn self_evaluation_is_degenerate() {
        let dir = tempdir().unwrap();
        let root = dir.path().join("data");
        generate_dataset(&DatasetGenSpec::desk(12, 91, true), &root).unwrap();
        let cfg = EvalConfig::desk_scale();
        let report = evaluate(&root, &root, &cfg).unwrap();

        assert_eq!(report.n_real, report.n_synth);
        assert!(report.n_real >= 2);
        let fid = report.fid.expect("fid computed");
        assert!(fid.abs() <= 1e-6, "self FID {fid}");
        let (a, b) = (report.ms_ssim.unwrap(), report.ms_ssim_real.unwrap());
        assert_eq!(a.to_bits(), b.to_bits(), "{a} vs {b}");
        // No probe checkpoints were configured, so exactly the CPA and
        // CSC lanes must report failures.
        assert_eq!(report.errors.len(), 2, "{:?}", report.errors);
        assert!(report.errors.iter().any(|e| e.starts_with("cpa:")));
        assert!(report.errors.iter().any(|e| e.starts_with("csc:")));
        assert!(!report.complete());
    }

    #[test]
    fn empty_candidate_dir_degrades_into_the_report() {
        let dir = tempdir().unwrap();
        let root = dir.path().join("data");
        generate_dataset(&DatasetGenSpec::desk(12, 92, true), &root).unwrap();
        let empty = dir.path().join("empty");
        std::fs::create_dir_all(&empty).unwrap();
        let report = evaluate(&root, &empty, &EvalConfig::desk_scale()).unwrap();
        assert_eq!(report.n_synth, 0);
        assert!(report.fid.is_none());
        assert!(report.errors.iter().any(|e| e.contains("loading synthetic volumes")));
        // The real-side baseline still lands.
        assert!(report.ms_ssim_real.is_some());
    }

    #[test]
    fn report_round_trips_through_json() {
        let dir = tempdir().unwrap();
        let mut report = MetricsReport::skeleton();
        report.n_real = 10;
        report.fid = Some(3.25);
        report.errors.push("csc: no segmenter checkpoint configured".into());
        let path = dir.path().join("metrics.json");
        write_metrics(&report, &path).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.schema_version, METRICS_SCHEMA_VERSION);
        assert_eq!(back.fid, Some(3.25));
        assert_eq!(back.n_real, 10);
        assert_eq!(back.errors.len(), 1);
    }
}
