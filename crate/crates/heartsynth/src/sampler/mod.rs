//! Reverse-diffusion sampling: classifier-free guidance, the ancestral
//! update, and the request-driven batch sampler that decodes latents back
//! to volumes and writes them with a JSONL manifest.
//!
//! Seed policy: each sample owns an independent ChaCha8 stream seeded
//! `request.seed + i·GOLDEN` (wrapping), so sample i is reproducible
//! regardless of how many samples surround it. Within one chain the draws
//! are ordered: the initial latent first, then one posterior-noise tensor
//! per reverse step with t > 0. Guidance itself draws nothing.

pub mod chain;
pub mod guidance;

use thiserror::Error;

use crate::compressor::model::CompressorError;
use crate::compressor::TrainCompressorError;
use crate::diffusion::schedule::ScheduleError;
use crate::diffusion::train::TrainLdmError;
use crate::io::nifti::NiftiError;
use crate::volume::VolumeError;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("guidance scale {0} must be finite and ≥ 0")]
    BadGuidance(f64),
    #[error("denoiser was trained without context dropout; guided sampling has no null branch")]
    NoNullBranch,
    #[error("denoiser expects compressor {expected}, got {got}")]
    CheckpointMismatch { expected: String, got: String },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Compressor(#[from] TrainCompressorError),
    #[error(transparent)]
    Denoiser(#[from] TrainLdmError),
    #[error(transparent)]
    Model(#[from] CompressorError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

pub use chain::{
    read_sample_manifest, reverse_step, sample, SampleHeader, SampleOutput, SampleRequest,
    SampleRow,
};
pub use guidance::{cfg_combine, guided_noise, Branch, DenoiserPredictor, NoisePredictor};
