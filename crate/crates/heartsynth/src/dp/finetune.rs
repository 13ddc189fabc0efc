//! Differentially private fine-tuning of the denoiser.
//!
//! Only the denoiser trains under privacy; the compressor stays frozen and
//! must itself have been fit on public data, otherwise the latent space
//! already leaks and no amount of gradient noise repairs that. Each step
//! Poisson-samples a batch, computes per-sample gradients, clips, noises,
//! and applies a plain SGD update normalized by the expected lot size.
//! The ledger is consulted *before* every step: a step that would overshoot
//! the ε target never runs.
//!
//! The DP-disabled sentinel (infinite target) walks the same loop with the
//! clip and noise branches inert, so the degenerate configuration σ = 0,
//! C = ∞ reproduces non-private training bit for bit under a shared seed.

use std::path::Path;

use ndarray::Array4;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compressor::{load_compressor, CompressorError, TrainCompressorError};
use crate::data::{load_dataset, split_indices, DataError};
use crate::diffusion::loss::diffusion_loss;
use crate::diffusion::schedule::{default_schedule, DEFAULT_STEPS};
use crate::diffusion::train::{encode_exam, load_denoiser, LdmMeta, TrainLdmError};
use crate::diffusion::unet::{Denoiser, DenoiserConfig};
use crate::dp::accountant::{
    calibrate_noise, AccountantError, PrivacyLedger, PrivacyReport, PrivacySpec,
};
use crate::dp::sgd::{clip_per_sample, noise_and_aggregate, poisson_sample};
use crate::io::checkpoint::{CheckpointDir, CheckpointError};
use crate::io::manifest::Split;
use crate::nn::{ParamStore, Sgd};

#[derive(Debug, Error)]
pub enum DpFinetuneError {
    #[error("compressor was trained on private data; DP fine-tuning requires a public one")]
    PrivateCompressor,
    #[error("pretrained denoiser expects compressor {expected}, got {got}")]
    CompressorMismatch { expected: String, got: String },
    #[error("manifest has no training records")]
    EmptyTrainSplit,
    #[error("compressor produces {comp} latent channels but the denoiser expects {denoiser}")]
    LatentChannelMismatch { comp: usize, denoiser: usize },
    #[error("privacy spec invalid: {0}")]
    BadSpec(String),
    #[error("even the first step would spend ε = {would:.4} > target {target}")]
    BudgetExceeded { would: f64, target: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Compressor(#[from] TrainCompressorError),
    #[error(transparent)]
    Model(#[from] CompressorError),
    #[error(transparent)]
    Denoiser(#[from] TrainLdmError),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone)]
pub struct DpFinetuneOpts {
    /// Architecture for from-scratch runs; ignored when `pretrained` is
    /// given (the checkpoint's own config wins).
    pub denoiser: DenoiserConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub ctx_dropout_p: f64,
}

impl DpFinetuneOpts {
    pub fn desk_scale() -> Self {
        Self {
            denoiser: DenoiserConfig::desk_scale(),
            epochs: 10,
            batch_size: 64,
            lr: 2e-3,
            seed: 17,
            ctx_dropout_p: 0.1,
        }
    }
}

pub fn dp_finetune(
    dataset_dir: &Path,
    compressor_ckpt: &Path,
    pretrained: Option<&Path>,
    out_ckpt: &Path,
    spec: &PrivacySpec,
    opts: &DpFinetuneOpts,
) -> Result<LdmMeta, DpFinetuneError> {
    let (_desc, exams) = load_dataset(dataset_dir, false)?;
    let train = split_indices(&exams, Split::Train);
    if train.is_empty() {
        return Err(DpFinetuneError::EmptyTrainSplit);
    }
    let (cps, comp, cmeta) = load_compressor(compressor_ckpt)?;
    if !cmeta.trained_on_public {
        return Err(DpFinetuneError::PrivateCompressor);
    }

    let (mut ps, net, config) = match pretrained {
        Some(path) => {
            let (ps, net, pmeta) = load_denoiser(path)?;
            if pmeta.compressor_fingerprint != cmeta.fingerprint {
                return Err(DpFinetuneError::CompressorMismatch {
                    expected: pmeta.compressor_fingerprint,
                    got: cmeta.fingerprint,
                });
            }
            let config = pmeta.denoiser.clone();
            (ps, net, config)
        }
        None => {
            let mut ps = ParamStore::new(opts.seed);
            let net = Denoiser::new(&mut ps, opts.denoiser.clone());
            (ps, net, opts.denoiser.clone())
        }
    };
    if cmeta.config.latent_channels != config.latent_channels {
        return Err(DpFinetuneError::LatentChannelMismatch {
            comp: cmeta.config.latent_channels,
            denoiser: config.latent_channels,
        });
    }

    // Resolve the run plan: sample rate, steps, noise.
    let n = train.len();
    let dp_active = !spec.is_disabled();
    let q = spec
        .sample_rate
        .unwrap_or_else(|| (opts.batch_size as f64 / n as f64).min(1.0));
    if !(0.0..=1.0).contains(&q) || q == 0.0 {
        return Err(DpFinetuneError::BadSpec(format!("sample rate {q} outside (0, 1]")));
    }
    let steps_per_epoch = n.div_ceil(opts.batch_size);
    let planned = spec.max_steps.unwrap_or(opts.epochs * steps_per_epoch);
    let sigma = match spec.noise_multiplier {
        Some(s) if s >= 0.0 => s,
        Some(s) => return Err(DpFinetuneError::BadSpec(format!("noise multiplier {s} < 0"))),
        None if dp_active => calibrate_noise(spec.target_epsilon, spec.delta, q, planned)?,
        None => 0.0,
    };
    if dp_active {
        if !(spec.clip_norm.is_finite() && spec.clip_norm > 0.0) {
            return Err(DpFinetuneError::BadSpec(format!(
                "clip norm {} must be finite and positive under DP",
                spec.clip_norm
            )));
        }
        if !(0.0..1.0).contains(&spec.delta) || spec.delta == 0.0 {
            return Err(DpFinetuneError::BadSpec(format!("delta {} outside (0, 1)", spec.delta)));
        }
    }
    let resolved = PrivacySpec {
        target_epsilon: spec.target_epsilon,
        delta: spec.delta,
        clip_norm: spec.clip_norm,
        noise_multiplier: Some(sigma),
        sample_rate: Some(q),
        max_steps: Some(planned),
    };

    // The expected lot size is the data-independent normalizer for updates.
    let lot = ((q * n as f64).round() as usize).max(1);

    // Latents are precomputed once; DP fine-tuning never augments, keeping
    // each sample's gradient a pure function of its stored exam.
    let mut latents: Vec<Array4<f32>> = Vec::with_capacity(n);
    for &i in &train {
        latents.push(encode_exam(&comp, &cps, &exams[i], cmeta.latent_scale)?);
    }

    let sched = default_schedule();
    let sgd = Sgd { lr: opts.lr as f32 };
    let mut data_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x00_da7a);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x00_0d5e);
    let mut ledger = PrivacyLedger::new(spec.delta);
    let mut acc = ps.grads();
    let mut per_sample = ps.grads();
    let mut step_losses: Vec<f64> = Vec::with_capacity(planned);

    for step in 0..planned {
        if dp_active {
            let would = ledger.epsilon_after(q, sigma);
            if would > spec.target_epsilon {
                if step == 0 {
                    return Err(DpFinetuneError::BudgetExceeded {
                        would,
                        target: spec.target_epsilon,
                    });
                }
                break;
            }
        }
        let batch = poisson_sample(n, q, &mut data_rng);
        acc.zero();
        let mut loss_sum = 0.0f64;
        for &k in &batch {
            per_sample.zero();
            let e = &exams[train[k]];
            loss_sum += diffusion_loss(
                &net,
                &ps,
                Some(&mut per_sample),
                &sched,
                &latents[k],
                &e.context,
                &e.pad_mask,
                &mut data_rng,
                opts.ctx_dropout_p,
            );
            clip_per_sample(&mut per_sample, spec.clip_norm);
            debug_assert!(per_sample.l2_norm() <= spec.clip_norm + 1e-6);
            acc.add_assign(&per_sample);
        }
        noise_and_aggregate(&mut acc, spec.clip_norm, sigma, lot, &mut noise_rng);
        sgd.step(&mut ps, &acc);
        if dp_active {
            ledger.append(q, sigma);
        }
        step_losses.push(if batch.is_empty() { f64::NAN } else { loss_sum / batch.len() as f64 });
    }

    let final_epsilon = ledger.epsilon();
    let tail = step_losses.iter().rev().take(steps_per_epoch).filter(|l| l.is_finite());
    let (mut train_loss, mut cnt) = (0.0, 0usize);
    for l in tail {
        train_loss += l;
        cnt += 1;
    }
    train_loss /= cnt.max(1) as f64;

    let privacy = dp_active.then(|| PrivacyReport {
        spec: resolved,
        ledger,
        final_epsilon,
    });
    let ckpt = CheckpointDir::new(out_ckpt);
    let mut meta_out = None;
    ckpt.save(ps.flat(), |fingerprint| {
        let m = LdmMeta {
            denoiser: config.clone(),
            schedule_steps: DEFAULT_STEPS,
            compressor_fingerprint: cmeta.fingerprint.clone(),
            latent_scale: cmeta.latent_scale,
            epochs: opts.epochs,
            train_loss,
            seed: opts.seed,
            ctx_dropout_p: opts.ctx_dropout_p,
            privacy: privacy.clone(),
            fingerprint,
        };
        meta_out = Some(m.clone());
        m
    })?;
    Ok(meta_out.expect("save ran the meta closure"))
}
