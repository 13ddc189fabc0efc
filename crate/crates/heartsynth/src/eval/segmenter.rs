//! Small segmentation network for measuring generated volumes.
//!
//! Conditioning fidelity is judged by segmenting generated volumes and
//! correlating the measured anatomy against the conditioned attributes.
//! Real datasets carry ground-truth masks, so the probe trains on the
//! train split and reports held-out Dice; generated volumes have no truth,
//! which is exactly why the probe exists. One encoder level, a skip
//! connection, and a four-class head are enough for phantom anatomy.
//!
//! The two blood pools are nearly indistinguishable by intensity alone, so
//! the input carries two normalized in-plane coordinate channels alongside
//! the image; that lets a shallow net separate left from right without the
//! receptive field having to span the torso.

use ndarray::{s, Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::{load_dataset, split_indices};
use crate::io::checkpoint::CheckpointDir;
use crate::io::manifest::Split;
use crate::nn::{
    concat_channels, silu, silu_grad, upsample2x, upsample2x_backward, Adam, Conv1x1, Conv1x3x3,
    GradBuf, GroupNorm, GroupNormCache, ParamStore,
};
use crate::volume::{SegmentationMask, VolumeGrid, LABEL_RV};

use super::EvalError;

/// Channel widths: encoder level and downsampled level.
pub const SEG_WIDTHS: [usize; 2] = [6, 12];

/// Segmentation classes: background, LV, myocardium, RV.
pub const SEG_CLASSES: usize = 4;

const GN_GROUPS: usize = 3;
const SHUFFLE_STREAM: u64 = 0x0000_5E69;

/// Image plus two coordinate channels.
const SEG_IN_CHANNELS: usize = 3;

/// Stacks the volume with x/y coordinate maps normalized to `[-1, 1]`.
fn with_coords(x: &Array4<f32>) -> Array4<f32> {
    let (d, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut aug = Array4::zeros((SEG_IN_CHANNELS, d, h, w));
    aug.slice_mut(s![0, .., .., ..]).assign(&x.slice(s![0, .., .., ..]));
    for dd in 0..d {
        for y in 0..h {
            for xx in 0..w {
                aug[[1, dd, y, xx]] = 2.0 * xx as f32 / (w - 1) as f32 - 1.0;
                aug[[2, dd, y, xx]] = 2.0 * y as f32 / (h - 1) as f32 - 1.0;
            }
        }
    }
    aug
}

pub struct SegNet {
    e1: Conv1x3x3,
    ge1: GroupNorm,
    d1: Conv1x3x3,
    gd1: GroupNorm,
    b1: Conv1x3x3,
    gb1: GroupNorm,
    f1: Conv1x3x3,
    gf1: GroupNorm,
    head: Conv1x1,
}

pub struct SegCache {
    x: Array4<f32>,
    gce1: GroupNormCache,
    ye1: Array4<f32>,
    he1: Array4<f32>,
    gcd1: GroupNormCache,
    yd1: Array4<f32>,
    hd1: Array4<f32>,
    gcb1: GroupNormCache,
    yb1: Array4<f32>,
    cat: Array4<f32>,
    gcf1: GroupNormCache,
    yf1: Array4<f32>,
    hf1: Array4<f32>,
}

impl SegNet {
    pub fn build(ps: &mut ParamStore, widths: [usize; 2]) -> Self {
        let [w0, w1] = widths;
        Self {
            e1: Conv1x3x3::new(ps, "seg.e1", SEG_IN_CHANNELS, w0, 1),
            ge1: GroupNorm::new(ps, "seg.ge1", w0, GN_GROUPS),
            d1: Conv1x3x3::new(ps, "seg.d1", w0, w1, 2),
            gd1: GroupNorm::new(ps, "seg.gd1", w1, GN_GROUPS),
            b1: Conv1x3x3::new(ps, "seg.b1", w1, w1, 1),
            gb1: GroupNorm::new(ps, "seg.gb1", w1, GN_GROUPS),
            f1: Conv1x3x3::new(ps, "seg.f1", w0 + w1, w0, 1),
            gf1: GroupNorm::new(ps, "seg.gf1", w0, GN_GROUPS),
            head: Conv1x1::new(ps, "seg.head", w0, SEG_CLASSES),
        }
    }

    /// Per-voxel class logits `[4, D, H, W]` for one `[1, D, H, W]` volume.
    pub fn forward(&self, ps: &ParamStore, x: &Array4<f32>) -> (Array4<f32>, SegCache) {
        assert!(
            x.shape()[2] % 2 == 0 && x.shape()[3] % 2 == 0,
            "in-plane dims must be even for the skip connection"
        );
        let x = with_coords(x);
        let ae1 = self.e1.forward(ps, &x);
        let (ye1, gce1) = self.ge1.forward(ps, &ae1);
        let he1 = ye1.mapv(silu);
        let ad1 = self.d1.forward(ps, &he1);
        let (yd1, gcd1) = self.gd1.forward(ps, &ad1);
        let hd1 = yd1.mapv(silu);
        let ab1 = self.b1.forward(ps, &hd1);
        let (yb1, gcb1) = self.gb1.forward(ps, &ab1);
        let hb1 = yb1.mapv(silu);
        let up = upsample2x(&hb1);
        let cat = concat_channels(&up, &he1);
        let af1 = self.f1.forward(ps, &cat);
        let (yf1, gcf1) = self.gf1.forward(ps, &af1);
        let hf1 = yf1.mapv(silu);
        let logits = self.head.forward(ps, &hf1);
        let cache = SegCache { x, gce1, ye1, he1, gcd1, yd1, hd1, gcb1, yb1, cat, gcf1, yf1, hf1 };
        (logits, cache)
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        g: &mut GradBuf,
        cache: &SegCache,
        dlogits: &Array4<f32>,
    ) {
        let w1 = self.b1.cout;
        let dhf1 = self.head.backward(ps, g, &cache.hf1, dlogits);
        let dyf1 = &dhf1 * &cache.yf1.mapv(silu_grad);
        let daf1 = self.gf1.backward(ps, g, &cache.gcf1, &dyf1);
        let dcat = self.f1.backward(ps, g, &cache.cat, &daf1);
        let dup = dcat.slice(s![..w1, .., .., ..]).to_owned();
        let dskip = dcat.slice(s![w1.., .., .., ..]).to_owned();
        let dhb1 = upsample2x_backward(&dup);
        let dyb1 = &dhb1 * &cache.yb1.mapv(silu_grad);
        let dab1 = self.gb1.backward(ps, g, &cache.gcb1, &dyb1);
        let dhd1 = self.b1.backward(ps, g, &cache.hd1, &dab1);
        let dyd1 = &dhd1 * &cache.yd1.mapv(silu_grad);
        let dad1 = self.gd1.backward(ps, g, &cache.gcd1, &dyd1);
        let dhe1 = self.d1.backward(ps, g, &cache.he1, &dad1) + &dskip;
        let dye1 = &dhe1 * &cache.ye1.mapv(silu_grad);
        let dae1 = self.ge1.backward(ps, g, &cache.gce1, &dye1);
        self.e1.backward(ps, g, &cache.x, &dae1);
    }
}

/// Mean cross-entropy over voxels plus its gradient w.r.t. the logits.
fn seg_ce_and_grad(logits: &Array4<f32>, labels: &Array3<u8>) -> (f64, Array4<f32>) {
    let (c, d, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2], logits.shape()[3]);
    assert_eq!(labels.shape(), &[d, h, w]);
    let n = (d * h * w) as f64;
    let mut loss = 0.0f64;
    let mut grad = Array4::zeros((c, d, h, w));
    for dd in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut maxv = f32::NEG_INFINITY;
                for ch in 0..c {
                    maxv = maxv.max(logits[[ch, dd, y, x]]);
                }
                let mut denom = 0.0f64;
                for ch in 0..c {
                    denom += ((logits[[ch, dd, y, x]] - maxv) as f64).exp();
                }
                let target = labels[[dd, y, x]] as usize;
                let logp =
                    (logits[[target, dd, y, x]] - maxv) as f64 - denom.ln();
                loss -= logp;
                for ch in 0..c {
                    let p = ((logits[[ch, dd, y, x]] - maxv) as f64).exp() / denom;
                    let onehot = if ch == target { 1.0 } else { 0.0 };
                    grad[[ch, dd, y, x]] = ((p - onehot) / n) as f32;
                }
            }
        }
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegMeta {
    pub version: u32,
    pub fingerprint: String,
    pub widths: [usize; 2],
    /// Mean foreground Dice on the validation+test subjects.
    pub held_out_dice: f64,
    pub n_train: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SegTrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl SegTrainOpts {
    pub fn desk_scale() -> Self {
        Self { epochs: 16, batch_size: 2, lr: 5e-3, seed: 29 }
    }
}

/// Trains the segmenter on the train split (which must carry ground-truth
/// masks) and checkpoints it with its held-out Dice.
pub fn train_segmenter(
    data_root: &Path,
    ckpt_dir: &Path,
    opts: &SegTrainOpts,
) -> Result<SegMeta, EvalError> {
    let (_desc, exams) = load_dataset(data_root, true)?;
    let train = split_indices(&exams, Split::Train);
    let mut held = split_indices(&exams, Split::Val);
    held.extend(split_indices(&exams, Split::Test));
    if train.len() < 8 {
        return Err(EvalError::InsufficientData(format!(
            "{} training volumes; segmenter training needs at least 8",
            train.len()
        )));
    }
    if held.is_empty() {
        return Err(EvalError::InsufficientData("no held-out volumes".into()));
    }

    let mut ps = ParamStore::new(opts.seed);
    let net = SegNet::build(&mut ps, SEG_WIDTHS);
    let mut adam = Adam::new(opts.lr, ps.len());
    let mut g = ps.grads();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ SHUFFLE_STREAM);
    let mut order = train.clone();
    for _epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size) {
            g.zero();
            for &i in batch {
                let seg = exams[i].seg.as_ref().expect("loaded with segmentations");
                let (logits, cache) = net.forward(&ps, &exams[i].data);
                let (_loss, dlogits) = seg_ce_and_grad(&logits, &seg.labels);
                net.backward(&ps, &mut g, &cache, &dlogits);
            }
            g.scale(1.0 / batch.len() as f32);
            adam.step(&mut ps, &g);
        }
    }

    let mut pred = Vec::with_capacity(held.len());
    let mut truth = Vec::with_capacity(held.len());
    for &i in &held {
        pred.push(argmax_mask(&net.forward(&ps, &exams[i].data).0));
        truth.push(exams[i].seg.clone().expect("loaded with segmentations"));
    }
    let held_out_dice = mean_dice(&pred, &truth)?;

    let ckpt = CheckpointDir::new(ckpt_dir);
    let mut meta_out = None;
    ckpt.save(ps.flat(), |fingerprint| {
        let meta = SegMeta {
            version: 1,
            fingerprint,
            widths: SEG_WIDTHS,
            held_out_dice,
            n_train: train.len(),
            seed: opts.seed,
        };
        meta_out = Some(meta.clone());
        meta
    })?;
    Ok(meta_out.expect("meta filled during save"))
}

pub fn load_segmenter(dir: &Path) -> Result<(SegNet, ParamStore, SegMeta), EvalError> {
    let (weights, meta) = CheckpointDir::new(dir).load::<SegMeta>(|m| &m.fingerprint)?;
    let mut ps = ParamStore::new(0);
    let net = SegNet::build(&mut ps, meta.widths);
    ps.load_flat(&weights).map_err(EvalError::BadCheckpoint)?;
    Ok((net, ps, meta))
}

fn argmax_mask(logits: &Array4<f32>) -> SegmentationMask {
    let (c, d, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2], logits.shape()[3]);
    let mut labels = Array3::zeros((d, h, w));
    for dd in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                for ch in 1..c {
                    if logits[[ch, dd, y, x]] > logits[[best, dd, y, x]] {
                        best = ch;
                    }
                }
                labels[[dd, y, x]] = best as u8;
            }
        }
    }
    debug_assert!(SEG_CLASSES as u8 - 1 == LABEL_RV);
    SegmentationMask::new(labels).expect("argmax labels are in range")
}

/// Segments each volume by per-voxel argmax. Deterministic.
pub fn segment_volumes(
    net: &SegNet,
    ps: &ParamStore,
    volumes: &[VolumeGrid],
) -> Vec<SegmentationMask> {
    volumes
        .iter()
        .map(|v| {
            let (d, h, w) = (v.depth(), v.height(), v.width());
            let x = v.data.clone().into_shape_with_order([1, d, h, w]).expect("rank-4 view");
            argmax_mask(&net.forward(ps, &x).0)
        })
        .collect()
}

/// Convenience wrapper: load a checkpoint and segment.
pub fn segment(dir: &Path, volumes: &[VolumeGrid]) -> Result<Vec<SegmentationMask>, EvalError> {
    let (net, ps, _meta) = load_segmenter(dir)?;
    Ok(segment_volumes(&net, &ps, volumes))
}

/// Mean Dice over foreground classes and volumes; `(volume, class)` pairs
/// absent from both prediction and truth are skipped.
pub fn mean_dice(pred: &[SegmentationMask], truth: &[SegmentationMask]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch { left: pred.len(), right: truth.len() });
    }
    let mut sum = 0.0f64;
    let mut terms = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        for class in 1..=LABEL_RV {
            let mut inter = 0usize;
            let (mut np, mut nt) = (0usize, 0usize);
            for (&a, &b) in p.labels.iter().zip(t.labels.iter()) {
                if a == class {
                    np += 1;
                }
                if b == class {
                    nt += 1;
                }
                if a == class && b == class {
                    inter += 1;
                }
            }
            if np + nt > 0 {
                sum += 2.0 * inter as f64 / (np + nt) as f64;
                terms += 1;
            }
        }
    }
    if terms == 0 {
        return Err(EvalError::TooFewVolumes { have: 0, need: 1 });
    }
    Ok(sum / terms as f64)
}
