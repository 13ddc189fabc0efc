//! Cardiac-phase classifier and the conditioning phase accuracy score.
//!
//! A small convolutional classifier learns to tell end-systole from
//! end-diastole (cavity size separates the two cleanly), and CPA is the
//! fraction of generated volumes whose predicted phase matches the phase
//! they were conditioned on. The classifier trains on a real dataset's
//! train split and reports held-out accuracy so a low CPA can be blamed on
//! the generator rather than the probe.

use ndarray::{s, Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::context::{ContextVector, Phase};
use crate::data::{load_dataset, split_indices, LoadedExam};
use crate::io::checkpoint::CheckpointDir;
use crate::io::manifest::Split;
use crate::nn::{
    cross_entropy_and_grad, silu, silu_grad, Adam, Conv1x3x3, GradBuf, GroupNorm, GroupNormCache,
    Linear, ParamStore,
};
use crate::volume::VolumeGrid;

use super::EvalError;

/// Channel widths of the two convolution stages.
pub const PHASE_CHANNELS: [usize; 2] = [8, 16];

const GN_GROUPS: usize = 4;

/// XOR'd into the training seed so the shuffle stream never collides with
/// the weight-init stream.
const SHUFFLE_STREAM: u64 = 0x0000_9A5E;

/// Two stride-2 convolutions with group norm and SiLU, a global average
/// pool, and a linear head onto {ED, ES} logits.
pub struct PhaseNet {
    c1: Conv1x3x3,
    g1: GroupNorm,
    c2: Conv1x3x3,
    g2: GroupNorm,
    fc: Linear,
}

pub struct PhaseCache {
    x: Array4<f32>,
    gc1: GroupNormCache,
    y1: Array4<f32>,
    h1: Array4<f32>,
    gc2: GroupNormCache,
    y2: Array4<f32>,
    pooled: Array2<f32>,
    vox: usize,
}

impl PhaseNet {
    pub fn build(ps: &mut ParamStore, channels: [usize; 2]) -> Self {
        let c1 = Conv1x3x3::new(ps, "phase.c1", 1, channels[0], 2);
        let g1 = GroupNorm::new(ps, "phase.g1", channels[0], GN_GROUPS);
        let c2 = Conv1x3x3::new(ps, "phase.c2", channels[0], channels[1], 2);
        let g2 = GroupNorm::new(ps, "phase.g2", channels[1], GN_GROUPS);
        let fc = Linear::new(ps, "phase.fc", channels[1], 2);
        Self { c1, g1, c2, g2, fc }
    }

    /// Logits `[ED, ES]` for one `[1, D, H, W]` volume.
    pub fn forward(&self, ps: &ParamStore, x: &Array4<f32>) -> (Vec<f32>, PhaseCache) {
        let a1 = self.c1.forward(ps, x);
        let (y1, gc1) = self.g1.forward(ps, &a1);
        let h1 = y1.mapv(silu);
        let a2 = self.c2.forward(ps, &h1);
        let (y2, gc2) = self.g2.forward(ps, &a2);
        let h2 = y2.mapv(silu);
        let (c, d, hh, ww) = (h2.shape()[0], h2.shape()[1], h2.shape()[2], h2.shape()[3]);
        let vox = d * hh * ww;
        let mut pooled = Array2::zeros((1, c));
        for ch in 0..c {
            let mut sum = 0.0f64;
            for v in h2.slice(s![ch, .., .., ..]).iter() {
                sum += *v as f64;
            }
            pooled[[0, ch]] = (sum / vox as f64) as f32;
        }
        let logits = self.fc.forward(ps, &pooled);
        let cache = PhaseCache { x: x.clone(), gc1, y1, h1, gc2, y2, pooled, vox };
        (logits.row(0).to_vec(), cache)
    }

    pub fn backward(&self, ps: &ParamStore, g: &mut GradBuf, cache: &PhaseCache, dlogits: &[f32]) {
        let dl = Array2::from_shape_vec((1, 2), dlogits.to_vec()).expect("two logits");
        let dpool = self.fc.backward(ps, g, &cache.pooled, &dl);
        let (c, d, hh, ww) =
            (cache.y2.shape()[0], cache.y2.shape()[1], cache.y2.shape()[2], cache.y2.shape()[3]);
        let mut dh2 = Array4::zeros((c, d, hh, ww));
        for ch in 0..c {
            let per_vox = dpool[[0, ch]] / cache.vox as f32;
            dh2.slice_mut(s![ch, .., .., ..]).fill(per_vox);
        }
        let dy2 = &dh2 * &cache.y2.mapv(silu_grad);
        let da2 = self.g2.backward(ps, g, &cache.gc2, &dy2);
        let dh1 = self.c2.backward(ps, g, &cache.h1, &da2);
        let dy1 = &dh1 * &cache.y1.mapv(silu_grad);
        let da1 = self.g1.backward(ps, g, &cache.gc1, &dy1);
        self.c1.backward(ps, g, &cache.x, &da1);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseMeta {
    pub version: u32,
    pub fingerprint: String,
    pub channels: [usize; 2],
    /// Accuracy on the validation+test subjects, measured after training.
    pub held_out_accuracy: f64,
    pub n_train: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PhaseTrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl PhaseTrainOpts {
    pub fn desk_scale() -> Self {
        Self { epochs: 24, batch_size: 16, lr: 3e-3, seed: 23 }
    }
}

fn phase_label(ctx: &ContextVector) -> Result<usize, EvalError> {
    Ok(match ctx.phase_kind()? {
        Phase::Ed => 0,
        Phase::Es => 1,
    })
}

fn forward_label(net: &PhaseNet, ps: &ParamStore, exam: &LoadedExam) -> (Vec<f32>, PhaseCache) {
    net.forward(ps, &exam.data)
}

/// Trains the classifier on the train split and checkpoints it together
/// with its held-out accuracy.
pub fn train_phase_classifier(
    data_root: &Path,
    ckpt_dir: &Path,
    opts: &PhaseTrainOpts,
) -> Result<PhaseMeta, EvalError> {
    let (_desc, exams) = load_dataset(data_root, false)?;
    let train: Vec<usize> = split_indices(&exams, Split::Train);
    let mut held: Vec<usize> = split_indices(&exams, Split::Val);
    held.extend(split_indices(&exams, Split::Test));
    if train.len() < 8 {
        return Err(EvalError::InsufficientData(format!(
            "{} training volumes; phase training needs at least 8",
            train.len()
        )));
    }
    if held.is_empty() {
        return Err(EvalError::InsufficientData("no held-out volumes".into()));
    }
    let labels: Vec<usize> =
        exams.iter().map(|e| phase_label(&e.context)).collect::<Result<_, _>>()?;
    for class in 0..2usize {
        if !train.iter().any(|&i| labels[i] == class) {
            return Err(EvalError::InsufficientData(format!(
                "training split has no volumes of phase class {class}"
            )));
        }
    }

    let mut ps = ParamStore::new(opts.seed);
    let net = PhaseNet::build(&mut ps, PHASE_CHANNELS);
    let mut adam = Adam::new(opts.lr, ps.len());
    let mut g = ps.grads();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ SHUFFLE_STREAM);
    let mut order = train.clone();
    for _epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size) {
            g.zero();
            for &i in batch {
                let (logits, cache) = forward_label(&net, &ps, &exams[i]);
                let (_loss, dlogits) = cross_entropy_and_grad(&logits, labels[i]);
                net.backward(&ps, &mut g, &cache, &dlogits);
            }
            g.scale(1.0 / batch.len() as f32);
            adam.step(&mut ps, &g);
        }
    }

    let mut correct = 0usize;
    for &i in &held {
        let (logits, _) = forward_label(&net, &ps, &exams[i]);
        let pred = if logits[1] > logits[0] { 1 } else { 0 };
        if pred == labels[i] {
            correct += 1;
        }
    }
    let held_out_accuracy = correct as f64 / held.len() as f64;

    let ckpt = CheckpointDir::new(ckpt_dir);
    let mut meta_out = None;
    ckpt.save(ps.flat(), |fingerprint| {
        let meta = PhaseMeta {
            version: 1,
            fingerprint,
            channels: PHASE_CHANNELS,
            held_out_accuracy,
            n_train: train.len(),
            seed: opts.seed,
        };
        meta_out = Some(meta.clone());
        meta
    })?;
    Ok(meta_out.expect("meta filled during save"))
}

/// Loads a checkpointed classifier.
pub fn load_phase_classifier(dir: &Path) -> Result<(PhaseNet, ParamStore, PhaseMeta), EvalError> {
    let (weights, meta) = CheckpointDir::new(dir).load::<PhaseMeta>(|m| &m.fingerprint)?;
    let mut ps = ParamStore::new(0);
    let net = PhaseNet::build(&mut ps, meta.channels);
    ps.load_flat(&weights).map_err(EvalError::BadCheckpoint)?;
    Ok((net, ps, meta))
}

/// Predicted phase of each volume, by logit argmax. Deterministic.
pub fn classify_volumes(net: &PhaseNet, ps: &ParamStore, volumes: &[VolumeGrid]) -> Vec<Phase> {
    volumes
        .iter()
        .map(|v| {
            let (d, h, w) = (v.depth(), v.height(), v.width());
            let x = v.data.clone().into_shape_with_order([1, d, h, w]).expect("rank-4 view");
            let (logits, _) = net.forward(ps, &x);
            if logits[1] > logits[0] {
                Phase::Es
            } else {
                Phase::Ed
            }
        })
        .collect()
}

/// Convenience wrapper: load a checkpoint and classify.
pub fn classify_phase(dir: &Path, volumes: &[VolumeGrid]) -> Result<Vec<Phase>, EvalError> {
    let (net, ps, _meta) = load_phase_classifier(dir)?;
    Ok(classify_volumes(&net, &ps, volumes))
}

/// Fraction of volumes classified into their conditioned phase.
pub fn cpa(predicted: &[Phase], contexts: &[ContextVector]) -> Result<f64, EvalError> {
    if predicted.len() != contexts.len() {
        return Err(EvalError::LengthMismatch { left: predicted.len(), right: contexts.len() });
    }
    if predicted.is_empty() {
        return Err(EvalError::TooFewVolumes { have: 0, need: 1 });
    }
    let mut hits = 0usize;
    for (p, ctx) in predicted.iter().zip(contexts) {
        if *p == ctx.phase_kind()? {
            hits += 1;
        }
    }
    Ok(hits as f64 / predicted.len() as f64)
}
