//! The ancestral reverse chain and the request-driven batch sampler.
//!
//! `reverse_step` applies the posterior-mean update for one timestep with
//! fresh noise at the posterior variance (none at t = 0). `sample` runs
//! the full chain per requested volume, decodes through the compressor
//! that the denoiser was trained against (enforced by fingerprint), and
//! writes NIfTI volumes plus a manifest whose header carries a digest of
//! the exact request.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compressor::model::SPATIAL_FACTOR;
use crate::compressor::train::load_compressor;
use crate::context::ContextVector;
use crate::diffusion::schedule::{
    build_schedule, NoiseSchedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN,
};
use crate::diffusion::train::load_denoiser;
use crate::io::nifti::write_volume;
use crate::sampler::guidance::{guided_noise, DenoiserPredictor};
use crate::sampler::SamplerError;
use crate::volume::VolumeGrid;

/// Stride between per-sample RNG streams (odd, golden-ratio derived).
const STREAM_STRIDE: u64 = 0x9e37_79b9_7f4a_7c15;

/// One DDPM ancestral update: posterior mean from the predicted noise,
/// plus noise at the posterior variance β̃_t. No noise is ever added at
/// t = 0, and `rng: None` suppresses it at every step (deterministic
/// mean-only update, used by teacher-forced chains).
pub fn reverse_step(
    sched: &NoiseSchedule,
    x_t: &Array4<f32>,
    eps_hat: &Array4<f32>,
    t: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Array4<f32> {
    debug_assert!(t < sched.steps(), "t = {t} out of range");
    debug_assert_eq!(x_t.shape(), eps_hat.shape());
    let beta = sched.beta[t];
    let inv_sqrt_alpha = (1.0 / sched.alpha[t].sqrt()) as f32;
    let eps_coef = (beta / (1.0 - sched.alpha_bar[t]).sqrt()) as f32;
    let mut out = x_t.clone();
    for (o, e) in out.iter_mut().zip(eps_hat.iter()) {
        *o = inv_sqrt_alpha * (*o - eps_coef * *e);
    }
    if t > 0 {
        if let Some(rng) = rng {
            let beta_tilde = (1.0 - sched.alpha_bar[t - 1]) / (1.0 - sched.alpha_bar[t]) * beta;
            let sigma = beta_tilde.sqrt() as f32;
            for o in out.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *o += sigma * z as f32;
            }
        }
    }
    out
}

/// What to generate: one context per sample plus the shared guidance
/// scale and master seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRequest {
    pub count: usize,
    pub contexts: Vec<ContextVector>,
    pub guidance: f64,
    pub seed: u64,
}

impl SampleRequest {
    /// Content hash binding the request to the exact checkpoints used.
    pub fn digest(&self, compressor_fp: &str, denoiser_fp: &str) -> String {
        let ctxs: Vec<Vec<f64>> = self.contexts.iter().map(|c| c.to_raw().to_vec()).collect();
        let payload = serde_json::json!({
            "count": self.count,
            "guidance": self.guidance,
            "seed": self.seed,
            "contexts": ctxs,
            "compressor": compressor_fp,
            "denoiser": denoiser_fp,
        });
        format!("{:x}", Sha256::digest(payload.to_string().as_bytes()))
    }
}

/// First manifest line: run-level provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleHeader {
    pub count: usize,
    pub guidance: f64,
    pub seed: u64,
    pub compressor_fingerprint: String,
    pub denoiser_fingerprint: String,
    pub request_digest: String,
}

/// One generated volume: its file plus the conditioning it was asked for.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRow {
    pub index: usize,
    pub path: String,
    #[serde(flatten)]
    pub context: ContextVector,
}

#[derive(Debug)]
pub struct SampleOutput {
    pub volumes: Vec<VolumeGrid>,
    pub header: SampleHeader,
    pub rows: Vec<SampleRow>,
}

fn io_err(path: &Path, source: std::io::Error) -> SamplerError {
    SamplerError::Io { path: path.display().to_string(), source }
}

/// Runs the full request: per-sample reverse chains in latent space,
/// decoding, NIfTI output, and `manifest.jsonl`. Bit-deterministic for a
/// fixed request and checkpoints.
pub fn sample(
    compressor_ckpt: &Path,
    denoiser_ckpt: &Path,
    out_dir: &Path,
    req: &SampleRequest,
) -> Result<SampleOutput, SamplerError> {
    if req.contexts.len() != req.count {
        return Err(SamplerError::BadRequest(format!(
            "{} contexts for {} samples",
            req.contexts.len(),
            req.count
        )));
    }
    if !req.guidance.is_finite() || req.guidance < 0.0 {
        return Err(SamplerError::BadGuidance(req.guidance));
    }
    let (cps, comp, cmeta) = load_compressor(compressor_ckpt)?;
    let (dps, net, dmeta) = load_denoiser(denoiser_ckpt)?;
    if dmeta.compressor_fingerprint != cmeta.fingerprint {
        return Err(SamplerError::CheckpointMismatch {
            expected: dmeta.compressor_fingerprint,
            got: cmeta.fingerprint,
        });
    }
    if req.guidance > 0.0 && dmeta.ctx_dropout_p == 0.0 {
        return Err(SamplerError::NoNullBranch);
    }
    let sched = build_schedule(dmeta.schedule_steps, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)?;
    let [d, h, w] = cmeta.dims;
    let (zc, hh, ww) = (cmeta.config.latent_channels, h / SPATIAL_FACTOR, w / SPATIAL_FACTOR);
    let pad = vec![true; d];
    let null_ctx = (dmeta.ctx_dropout_p > 0.0).then(|| net.context.null_embedding(&dps));
    let scale = dmeta.latent_scale as f32;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let mut volumes = Vec::with_capacity(req.count);
    let mut rows = Vec::with_capacity(req.count);
    for i in 0..req.count {
        let mut rng = ChaCha8Rng::seed_from_u64(
            req.seed.wrapping_add((i as u64).wrapping_mul(STREAM_STRIDE)),
        );
        let mut x = Array4::from_shape_fn((zc, d, hh, ww), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        });
        let (ctx_mat, _) = net.context.forward(&dps, &req.contexts[i]);
        let mut pred = DenoiserPredictor {
            net: &net,
            ps: &dps,
            ctx_cond: ctx_mat,
            ctx_null: null_ctx.clone(),
            pad_mask: &pad,
        };
        for t in (0..sched.steps()).rev() {
            let eps_hat = guided_noise(&mut pred, &x, t, req.guidance)?;
            x = reverse_step(&sched, &x, &eps_hat, t, Some(&mut rng));
        }
        let z = x.mapv(|v| v * scale);
        let vol = comp.decode(&cps, &z, &pad)?;
        let data = vol.index_axis(Axis(0), 0).to_owned();
        let name = format!("vol_{i:04}.nii.gz");
        write_volume(&out_dir.join(&name), &data, cmeta.spacing)?;
        volumes.push(VolumeGrid::new(data, cmeta.spacing, pad.clone())?);
        rows.push(SampleRow { index: i, path: name, context: req.contexts[i] });
    }

    let header = SampleHeader {
        count: req.count,
        guidance: req.guidance,
        seed: req.seed,
        compressor_fingerprint: cmeta.fingerprint.clone(),
        denoiser_fingerprint: dmeta.fingerprint.clone(),
        request_digest: req.digest(&cmeta.fingerprint, &dmeta.fingerprint),
    };
    let mpath = out_dir.join("manifest.jsonl");
    let mut wtr = BufWriter::new(File::create(&mpath).map_err(|e| io_err(&mpath, e))?);
    writeln!(wtr, "{}", serde_json::to_string(&header)?).map_err(|e| io_err(&mpath, e))?;
    for row in &rows {
        writeln!(wtr, "{}", serde_json::to_string(row)?).map_err(|e| io_err(&mpath, e))?;
    }
    wtr.flush().map_err(|e| io_err(&mpath, e))?;
    Ok(SampleOutput { volumes, header, rows })
}

/// Reads a sample manifest back: header line, then one row per volume.
pub fn read_sample_manifest(path: &Path) -> Result<(SampleHeader, Vec<SampleRow>), SamplerError> {
    let rdr = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut header: Option<SampleHeader> = None;
    let mut rows = Vec::new();
    for (i, line) in rdr.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            header = Some(
                serde_json::from_str(&line)
                    .map_err(|e| SamplerError::Parse { line: i + 1, source: e })?,
            );
        } else {
            rows.push(
                serde_json::from_str(&line)
                    .map_err(|e| SamplerError::Parse { line: i + 1, source: e })?,
            );
        }
    }
    let header = header.ok_or_else(|| {
        SamplerError::BadRequest(format!("{}: empty manifest", path.display()))
    })?;
    Ok((header, rows))
}
