//! Batch training for the compression stage, plus checkpoint round-trip.
//!
//! Compressors are trained on public data only: the latent space they define
//! is reused by every later stage, so leaking private intensities into it
//! would silently void any privacy guarantee made downstream. The trainer
//! refuses private datasets unless the caller opts out explicitly.

use std::path::Path;

use ndarray::Array4;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compressor::model::{Bottleneck, Compressor, CompressorConfig, CompressorError};
use crate::compressor::CompressorKind;
use crate::data::{load_dataset, split_indices, DataError, LoadedExam};
use crate::io::checkpoint::{read_meta, CheckpointDir, CheckpointError};
use crate::io::manifest::Split;
use crate::nn::{Adam, ParamStore};
use crate::volume::Spacing;

#[derive(Debug, Error)]
pub enum TrainCompressorError {
    #[error("dataset is private; compressor training requires public data")]
    PrivateDataRefused,
    #[error("manifest has no training records")]
    EmptyTrainSplit,
    #[error("checkpoint weight count {got} does not match the model ({expected})")]
    WeightCount { got: usize, expected: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] CompressorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone)]
pub struct TrainCompressorOpts {
    pub config: CompressorConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Escape hatch for experiments; the standard pipelines keep this false.
    pub allow_private: bool,
}

impl TrainCompressorOpts {
    pub fn desk_scale(kind: CompressorKind) -> Self {
        Self {
            config: CompressorConfig::desk_scale(kind),
            epochs: 18,
            batch_size: 8,
            lr: 2e-3,
            seed: 7,
            allow_private: false,
        }
    }
}

/// Everything needed to rebuild and trust a trained compressor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressorMeta {
    pub config: CompressorConfig,
    /// False when the escape hatch let private data in; downstream DP
    /// stages refuse such compressors.
    pub trained_on_public: bool,
    /// Std of the masked training latents; diffusion divides by this so its
    /// inputs land near unit scale.
    pub latent_scale: f64,
    /// Pixel geometry of the training volumes; samplers decode back into
    /// exactly this grid.
    pub dims: [usize; 3],
    pub spacing: Spacing,
    pub epochs: usize,
    pub train_loss: f64,
    pub val_psnr: f64,
    pub seed: u64,
    pub fingerprint: String,
}

/// Trains a compressor on the dataset at `dataset_dir` and writes a
/// checkpoint (weights blob + meta) to `ckpt_dir`. Fully deterministic for a
/// fixed dataset and options.
pub fn train_compressor(
    dataset_dir: &Path,
    ckpt_dir: &Path,
    opts: &TrainCompressorOpts,
) -> Result<CompressorMeta, TrainCompressorError> {
    let (desc, exams) = load_dataset(dataset_dir, false)?;
    if !desc.public && !opts.allow_private {
        return Err(TrainCompressorError::PrivateDataRefused);
    }
    let train = split_indices(&exams, Split::Train);
    if train.is_empty() {
        return Err(TrainCompressorError::EmptyTrainSplit);
    }
    let val = {
        let v = split_indices(&exams, Split::Val);
        if v.is_empty() { train.clone() } else { v }
    };

    let mut ps = ParamStore::new(opts.seed);
    let model = Compressor::new(&mut ps, opts.config.clone());
    let mut adam = Adam::new(opts.lr as f32, ps.len());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x00c0_ffee);

    let is_vq = opts.config.kind == CompressorKind::VqVae;
    let mut last_epoch_loss = 0.0f64;
    for _epoch in 0..opts.epochs {
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let mut usage = vec![0usize; if is_vq { opts.config.codebook_size } else { 0 }];
        // Encoder outputs sampled this epoch, used to revive dead codes.
        let mut revive_pool: Vec<Vec<f32>> = Vec::new();
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for batch in order.chunks(opts.batch_size) {
            let mut g = ps.grads();
            for &i in batch {
                let e = &exams[i];
                let (recon, cache) = model.forward_train(&ps, &e.data, &e.pad_mask, &mut rng)?;
                let losses = model.loss_and_backward(&ps, &mut g, &recon, &cache, &e.pad_mask);
                epoch_loss += losses.total;
                seen += 1;
                if is_vq {
                    tally_vq(&model, &cache, &e.pad_mask, &mut usage, &mut revive_pool, &mut rng);
                }
            }
            g.scale(1.0 / batch.len() as f32);
            adam.step(&mut ps, &g);
        }
        last_epoch_loss = epoch_loss / seen.max(1) as f64;
        if is_vq && !revive_pool.is_empty() {
            for (code, &n) in usage.iter().enumerate() {
                if n == 0 {
                    let v = &revive_pool[rng.random_range(0..revive_pool.len())];
                    model.reset_code(&mut ps, code, v);
                }
            }
        }
    }

    let latent_scale = masked_latent_std(&model, &ps, &exams, &train)?;
    let val_psnr = mean_psnr(&model, &ps, &exams, &val)?;

    let ckpt = CheckpointDir::new(ckpt_dir);
    let mut meta_out = None;
    ckpt.save(ps.flat(), |fingerprint| {
        let m = CompressorMeta {
            config: opts.config.clone(),
            trained_on_public: desc.public,
            latent_scale,
            dims: desc.dims,
            spacing: desc.spacing,
            epochs: opts.epochs,
            train_loss: last_epoch_loss,
            val_psnr,
            seed: opts.seed,
            fingerprint,
        };
        meta_out = Some(m.clone());
        m
    })?;
    Ok(meta_out.expect("save ran the meta closure"))
}

/// Counts codebook usage on real slices and stashes a few encoder vectors
/// as revival candidates.
fn tally_vq(
    model: &Compressor,
    cache: &crate::compressor::model::CompressorCache,
    mask: &[bool],
    usage: &mut [usize],
    pool: &mut Vec<Vec<f32>>,
    rng: &mut ChaCha8Rng,
) {
    let Some(indices) = model.vq_indices(cache) else { return };
    let Bottleneck::Vq { z_e, .. } = &cache.bottleneck else { return };
    let (d, h, w) = (z_e.shape()[1], z_e.shape()[2], z_e.shape()[3]);
    let zc = z_e.shape()[0];
    for (p, &code) in indices.iter().enumerate() {
        let di = p / (h * w);
        if !mask[di] {
            continue;
        }
        usage[code] += 1;
        // Reservoir-ish: keep the pool small but fresh.
        if pool.len() < 512 {
            let rem = p % (h * w);
            let (i, j) = (rem / w, rem % w);
            if rng.random_bool(0.02) {
                pool.push((0..zc).map(|c| z_e[[c, di, i, j]]).collect());
            }
        }
    }
    let _ = d;
}

/// Std of latent entries over real slices of the given exams.
fn masked_latent_std(
    model: &Compressor,
    ps: &ParamStore,
    exams: &[LoadedExam],
    idx: &[usize],
) -> Result<f64, TrainCompressorError> {
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut n = 0usize;
    for &i in idx {
        let e = &exams[i];
        let z = model.encode(ps, &e.data, &e.pad_mask)?;
        let (_, d, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]);
        for c in 0..z.shape()[0] {
            for di in 0..d {
                if !e.pad_mask[di] {
                    continue;
                }
                for y in 0..h {
                    for x in 0..w {
                        let v = z[[c, di, y, x]] as f64;
                        sum += v;
                        sum_sq += v * v;
                        n += 1;
                    }
                }
            }
        }
    }
    let n = n.max(1) as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(1e-12);
    Ok(var.sqrt())
}

/// Mean reconstruction PSNR (dB) over the given exams, masked to real slices.
/// Signal range is 1, so PSNR = -10·log10(MSE).
pub fn mean_psnr(
    model: &Compressor,
    ps: &ParamStore,
    exams: &[LoadedExam],
    idx: &[usize],
) -> Result<f64, TrainCompressorError> {
    let mut total = 0.0f64;
    for &i in idx {
        let e = &exams[i];
        let z = model.encode(ps, &e.data, &e.pad_mask)?;
        let recon = model.decode(ps, &z, &e.pad_mask)?;
        let mse = masked_mse(&recon, &e.data, &e.pad_mask);
        total += -10.0 * mse.max(1e-12).log10();
    }
    Ok(total / idx.len().max(1) as f64)
}

fn masked_mse(a: &Array4<f32>, b: &Array4<f32>, mask: &[bool]) -> f64 {
    let (c, d, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for ci in 0..c {
        for di in 0..d {
            if !mask[di] {
                continue;
            }
            for y in 0..h {
                for x in 0..w {
                    let diff = (a[[ci, di, y, x]] - b[[ci, di, y, x]]) as f64;
                    acc += diff * diff;
                    n += 1;
                }
            }
        }
    }
    acc / n.max(1) as f64
}

/// Rebuilds a compressor from a checkpoint directory, verifying the weight
/// fingerprint.
pub fn load_compressor(
    ckpt_dir: &Path,
) -> Result<(ParamStore, Compressor, CompressorMeta), TrainCompressorError> {
    let meta: CompressorMeta = read_meta(ckpt_dir)?;
    let mut ps = ParamStore::new(0);
    let model = Compressor::new(&mut ps, meta.config.clone());
    let (weights, meta) = CheckpointDir::new(ckpt_dir).load::<CompressorMeta>(|m| &m.fingerprint)?;
    ps.load_flat(&weights)
        .map_err(|_| TrainCompressorError::WeightCount { got: weights.len(), expected: ps.len() })?;
    Ok((ps, model, meta))
}
