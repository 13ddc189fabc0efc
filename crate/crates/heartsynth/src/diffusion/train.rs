//! Non-private training for the latent denoiser.
//!
//! The trainer encodes every exam through a frozen compressor, rescales the
//! latents to roughly unit spread using the compressor's stored latent
//! scale, and fits the denoiser with Adam on the masked ε-prediction loss.
//! The resulting checkpoint records the compressor fingerprint it was
//! built against, so later stages can refuse to mix incompatible pairs.

use std::path::Path;

use ndarray::{Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compressor::{load_compressor, Compressor, CompressorError, TrainCompressorError};
use crate::data::{load_dataset, split_indices, DataError, LoadedExam};
use crate::diffusion::loss::{diffusion_loss, CTX_DROPOUT_P};
use crate::diffusion::schedule::{default_schedule, DEFAULT_STEPS};
use crate::diffusion::unet::{Denoiser, DenoiserConfig};
use crate::dp::accountant::PrivacyReport;
use crate::io::checkpoint::{read_meta, CheckpointDir, CheckpointError};
use crate::io::manifest::Split;
use crate::nn::{Adam, ParamStore};
use crate::phantom::{augment, AugmentConfig};
use crate::volume::{Spacing, VolumeGrid};

#[derive(Debug, Error)]
pub enum TrainLdmError {
    #[error("dataset is private; non-private training requires public data")]
    PrivateDataRefused,
    #[error("manifest has no training records")]
    EmptyTrainSplit,
    #[error("compressor produces {comp} latent channels but the denoiser expects {denoiser}")]
    LatentChannelMismatch { comp: usize, denoiser: usize },
    #[error("checkpoint weight count {got} does not match the model ({expected})")]
    WeightCount { got: usize, expected: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Compressor(#[from] TrainCompressorError),
    #[error(transparent)]
    Model(#[from] CompressorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone)]
pub struct TrainLdmOpts {
    pub denoiser: DenoiserConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiply the learning rate by `lr_decay` every this many epochs
    /// (0 disables).
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    pub seed: u64,
    /// Re-encode train exams through random affine augmentation each epoch.
    pub augment: bool,
    pub allow_private: bool,
    pub ctx_dropout_p: f64,
}

impl TrainLdmOpts {
    pub fn desk_scale() -> Self {
        Self {
            denoiser: DenoiserConfig::desk_scale(),
            epochs: 30,
            batch_size: 16,
            lr: 4e-4,
            lr_decay_every: 25,
            lr_decay: 0.9,
            seed: 11,
            augment: false,
            allow_private: false,
            ctx_dropout_p: CTX_DROPOUT_P,
        }
    }
}

/// Denoiser checkpoint metadata; `privacy` is present on DP-fine-tuned
/// checkpoints only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdmMeta {
    pub denoiser: DenoiserConfig,
    pub schedule_steps: usize,
    pub compressor_fingerprint: String,
    pub latent_scale: f64,
    pub epochs: usize,
    pub train_loss: f64,
    pub seed: u64,
    /// Context-dropout probability used in training. Zero means the null
    /// branch was never exercised, so guided sampling must refuse G > 0.
    pub ctx_dropout_p: f64,
    pub privacy: Option<PrivacyReport>,
    pub fingerprint: String,
}

/// Encodes one exam to a scaled latent.
pub fn encode_exam(
    comp: &Compressor,
    cps: &ParamStore,
    exam: &LoadedExam,
    latent_scale: f64,
) -> Result<Array4<f32>, CompressorError> {
    let z = comp.encode(cps, &exam.data, &exam.pad_mask)?;
    Ok(z.mapv(|v| v / latent_scale as f32))
}

/// Applies a random affine draw to the exam volume, then encodes it.
pub fn encode_augmented(
    comp: &Compressor,
    cps: &ParamStore,
    exam: &LoadedExam,
    spacing: Spacing,
    latent_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array4<f32>, CompressorError> {
    let vol = exam.data.index_axis(Axis(0), 0).to_owned();
    let grid = VolumeGrid::new(vol, spacing, exam.pad_mask.clone()).expect("loaded exam is valid");
    let aug = augment(&grid, rng, &AugmentConfig::default());
    let data = aug.data.insert_axis(Axis(0));
    let z = comp.encode(cps, &data, &exam.pad_mask)?;
    Ok(z.mapv(|v| v / latent_scale as f32))
}

pub fn train_ldm(
    dataset_dir: &Path,
    compressor_ckpt: &Path,
    out_ckpt: &Path,
    opts: &TrainLdmOpts,
) -> Result<LdmMeta, TrainLdmError> {
    let (desc, exams) = load_dataset(dataset_dir, false)?;
    if !desc.public && !opts.allow_private {
        return Err(TrainLdmError::PrivateDataRefused);
    }
    let train = split_indices(&exams, Split::Train);
    if train.is_empty() {
        return Err(TrainLdmError::EmptyTrainSplit);
    }
    let (cps, comp, cmeta) = load_compressor(compressor_ckpt)?;
    if cmeta.config.latent_channels != opts.denoiser.latent_channels {
        return Err(TrainLdmError::LatentChannelMismatch {
            comp: cmeta.config.latent_channels,
            denoiser: opts.denoiser.latent_channels,
        });
    }
    let sched = default_schedule();
    let mut ps = ParamStore::new(opts.seed);
    let net = Denoiser::new(&mut ps, opts.denoiser.clone());
    let mut adam = Adam::new(opts.lr as f32, ps.len());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x00_1d1f);

    // Without augmentation the latents are fixed, so encode once.
    let fixed: Option<Vec<Array4<f32>>> = if opts.augment {
        None
    } else {
        let mut v = Vec::with_capacity(train.len());
        for &i in &train {
            v.push(encode_exam(&comp, &cps, &exams[i], cmeta.latent_scale)?);
        }
        Some(v)
    };

    let mut last_epoch_loss = 0.0f64;
    for epoch in 0..opts.epochs {
        if opts.lr_decay_every > 0 {
            adam.lr = (opts.lr * opts.lr_decay.powi((epoch / opts.lr_decay_every) as i32)) as f32;
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for batch in order.chunks(opts.batch_size) {
            let mut g = ps.grads();
            for &k in batch {
                let e = &exams[train[k]];
                let tmp;
                let z: &Array4<f32> = match &fixed {
                    Some(v) => &v[k],
                    None => {
                        tmp = encode_augmented(
                            &comp,
                            &cps,
                            e,
                            desc.spacing,
                            cmeta.latent_scale,
                            &mut rng,
                        )?;
                        &tmp
                    }
                };
                epoch_loss += diffusion_loss(
                    &net,
                    &ps,
                    Some(&mut g),
                    &sched,
                    z,
                    &e.context,
                    &e.pad_mask,
                    &mut rng,
                    opts.ctx_dropout_p,
                );
                seen += 1;
            }
            g.scale(1.0 / batch.len() as f32);
            adam.step(&mut ps, &g);
        }
        last_epoch_loss = epoch_loss / seen.max(1) as f64;
    }

    let ckpt = CheckpointDir::new(out_ckpt);
    let mut meta_out = None;
    ckpt.save(ps.flat(), |fingerprint| {
        let m = LdmMeta {
            denoiser: opts.denoiser.clone(),
            schedule_steps: DEFAULT_STEPS,
            compressor_fingerprint: cmeta.fingerprint.clone(),
            latent_scale: cmeta.latent_scale,
            epochs: opts.epochs,
            train_loss: last_epoch_loss,
            seed: opts.seed,
            ctx_dropout_p: opts.ctx_dropout_p,
            privacy: None,
            fingerprint,
        };
        meta_out = Some(m.clone());
        m
    })?;
    Ok(meta_out.expect("save ran the meta closure"))
}

/// Rebuilds a denoiser from a checkpoint, verifying the weight fingerprint.
pub fn load_denoiser(ckpt_dir: &Path) -> Result<(ParamStore, Denoiser, LdmMeta), TrainLdmError> {
    let meta: LdmMeta = read_meta(ckpt_dir)?;
    let mut ps = ParamStore::new(0);
    let net = Denoiser::new(&mut ps, meta.denoiser.clone());
    let (weights, meta) = CheckpointDir::new(ckpt_dir).load::<LdmMeta>(|m| &m.fingerprint)?;
    ps.load_flat(&weights)
        .map_err(|_| TrainLdmError::WeightCount { got: weights.len(), expected: ps.len() })?;
    Ok((ps, net, meta))
}
