//! Raw exam → model-ready grid: resample to the target spacing, rotate
//! the LV–RV axis to canonical orientation (RV toward +x), center the
//! heart, min-max normalize, and mean-pad depth.
//!
//! Small estimated corrections snap to zero (0.5° rotation, quarter-voxel
//! shift), which is what makes a second pass the identity.

use ndarray::Array3;
use thiserror::Error;

use crate::volume::{SegmentationMask, Spacing, VolumeGrid, LABEL_BACKGROUND, LABEL_LV, LABEL_RV};

const ROTATION_SNAP_DEG: f64 = 1.0;
const SHIFT_SNAP_VOXELS: f64 = 0.25;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("input volume is constant; normalization undefined")]
    DegenerateInput,
    #[error("segmentation required for rotation and centering")]
    MissingSegmentation,
    #[error("volume shape {vol:?} does not match segmentation shape {seg:?}")]
    ShapeMismatch { vol: Vec<usize>, seg: Vec<usize> },
    #[error("volume error: {0}")]
    Volume(#[from] crate::volume::VolumeError),
}

/// An exam as it arrives: arbitrary spacing and orientation, optional
/// trailing slices already known to be padding.
#[derive(Debug, Clone)]
pub struct RawExam {
    pub volume: Array3<f32>,
    pub spacing: Spacing,
    pub seg: Option<Array3<u8>>,
    /// Number of leading real slices; `None` means all are real.
    pub real_depth: Option<usize>,
}

/// Output geometry. `dims` is (D, H, W); volumes with fewer real slices
/// are mean-padded up to D.
#[derive(Debug, Clone, Copy)]
pub struct PreprocessTarget {
    pub dims: [usize; 3],
    pub spacing: Spacing,
}

impl PreprocessTarget {
    pub fn full_scale() -> Self {
        Self { dims: crate::volume::FULL_SCALE_DIMS, spacing: crate::volume::TARGET_SPACING }
    }

    pub fn desk_scale() -> Self {
        // Same 130 × 175.4 × 175.4 mm field of view on a coarse grid.
        Self { dims: [7, 32, 32], spacing: [130.0 / 7.0, 175.38 / 32.0, 175.38 / 32.0] }
    }
}

/// In-plane LV→RV axis angle (radians) and heart centroid (mm, (y, x)).
fn estimate_pose(seg: &Array3<u8>, spacing: Spacing, real_d: usize) -> Option<(f64, (f64, f64))> {
    let (mut lv, mut rv, mut heart) = ((0.0, 0.0, 0usize), (0.0, 0.0, 0usize), (0.0, 0.0, 0usize));
    for ((k, i, j), &l) in seg.indexed_iter() {
        if k >= real_d || l == LABEL_BACKGROUND {
            continue;
        }
        let (y, x) = (i as f64 * spacing[1], j as f64 * spacing[2]);
        heart = (heart.0 + y, heart.1 + x, heart.2 + 1);
        if l == LABEL_LV {
            lv = (lv.0 + y, lv.1 + x, lv.2 + 1);
        } else if l == LABEL_RV {
            rv = (rv.0 + y, rv.1 + x, rv.2 + 1);
        }
    }
    if heart.2 == 0 {
        return None;
    }
    let centroid = (heart.0 / heart.2 as f64, heart.1 / heart.2 as f64);
    if lv.2 == 0 || rv.2 == 0 {
        // No axis estimate possible; keep orientation, center on mass.
        return Some((0.0, centroid));
    }
    let dy = rv.0 / rv.2 as f64 - lv.0 / lv.2 as f64;
    let dx = rv.1 / rv.2 as f64 - lv.1 / lv.2 as f64;
    Some((dy.atan2(dx), centroid))
}

fn trilinear(vol: &Array3<f32>, z: f64, y: f64, x: f64) -> f32 {
    let (d, h, w) = (vol.shape()[0], vol.shape()[1], vol.shape()[2]);
    let clamp = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64);
    let (z, y, x) = (clamp(z, d), clamp(y, h), clamp(x, w));
    let (z0, y0, x0) = (z.floor() as usize, y.floor() as usize, x.floor() as usize);
    let (z1, y1, x1) = ((z0 + 1).min(d - 1), (y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fz, fy, fx) = ((z - z0 as f64) as f32, (y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let at = |k: usize, i: usize, j: usize| vol[[k, i, j]];
    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
    let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
    let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
    let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
    let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
    lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz)
}

fn nearest(seg: &Array3<u8>, z: f64, y: f64, x: f64) -> u8 {
    let (d, h, w) = (seg.shape()[0], seg.shape()[1], seg.shape()[2]);
    let idx = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
    // Out-of-FOV reads clamp to the border, which is background for any
    // exam whose heart sits inside the frame.
    seg[[idx(z, d), idx(y, h), idx(x, w)]]
}

/// Full preprocessing pass. Returns the model-ready grid and the
/// identically transformed segmentation.
pub fn preprocess(
    raw: &RawExam,
    target: &PreprocessTarget,
) -> Result<(VolumeGrid, SegmentationMask), PreprocessError> {
    let seg = raw.seg.as_ref().ok_or(PreprocessError::MissingSegmentation)?;
    if seg.shape() != raw.volume.shape() {
        return Err(PreprocessError::ShapeMismatch {
            vol: raw.volume.shape().to_vec(),
            seg: seg.shape().to_vec(),
        });
    }
    let src_d = raw.volume.shape()[0];
    let src_real = raw.real_depth.unwrap_or(src_d).min(src_d);
    let [td, th, tw] = target.dims;
    let tsp = target.spacing;

    let (theta, centroid) =
        estimate_pose(seg, raw.spacing, src_real).ok_or(PreprocessError::MissingSegmentation)?;
    let theta = if theta.abs().to_degrees() < ROTATION_SNAP_DEG { 0.0 } else { theta };
    let out_center = ((th - 1) as f64 / 2.0 * tsp[1], (tw - 1) as f64 / 2.0 * tsp[2]);
    let snap = SHIFT_SNAP_VOXELS * tsp[1].min(tsp[2]);
    let translate = (
        if (centroid.0 - out_center.0).abs() < snap { 0.0 } else { centroid.0 - out_center.0 },
        if (centroid.1 - out_center.1).abs() < snap { 0.0 } else { centroid.1 - out_center.1 },
    );
    // Rotation pivot in the source frame; equals the centroid up to snap.
    let pivot = (out_center.0 + translate.0, out_center.1 + translate.1);

    let out_real = ((src_real as f64 * raw.spacing[0] / tsp[0]).round() as usize).clamp(1, td);
    let same_grid = raw.volume.shape() == [td, th, tw]
        && (raw.spacing[0] - tsp[0]).abs() < 1e-9
        && (raw.spacing[1] - tsp[1]).abs() < 1e-9
        && (raw.spacing[2] - tsp[2]).abs() < 1e-9;
    let identity = same_grid && theta == 0.0 && translate == (0.0, 0.0);

    let (mut out_vol, mut out_seg);
    if identity {
        out_vol = raw.volume.clone();
        out_seg = seg.clone();
    } else {
        out_vol = Array3::zeros((td, th, tw));
        out_seg = Array3::from_elem((td, th, tw), LABEL_BACKGROUND);
        let (cos_t, sin_t) = (theta.cos(), theta.sin());
        let real_span = out_real.min(td);
        for k in 0..real_span {
            // Front-aligned depth mapping, clamped to real source slices.
            let z_src = (k as f64 * tsp[0] / raw.spacing[0]).min((src_real - 1) as f64);
            for i in 0..th {
                let oy = i as f64 * tsp[1] - out_center.0;
                for j in 0..tw {
                    let ox = j as f64 * tsp[2] - out_center.1;
                    // Sampling frame rotated by +θ turns content by −θ,
                    // putting the RV on the +x side.
                    let sy_mm = pivot.0 + oy * cos_t + ox * sin_t;
                    let sx_mm = pivot.1 + ox * cos_t - oy * sin_t;
                    let (sy, sx) = (sy_mm / raw.spacing[1], sx_mm / raw.spacing[2]);
                    out_vol[[k, i, j]] = trilinear(&raw.volume, z_src, sy, sx);
                    out_seg[[k, i, j]] = nearest(seg, z_src, sy, sx);
                }
            }
        }
    }

    // Min-max normalize over real slices, then mean-pad.
    let real_span = if identity { src_real.min(td) } else { out_real.min(td) };
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for k in 0..real_span {
        for i in 0..th {
            for j in 0..tw {
                let v = out_vol[[k, i, j]];
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !(hi - lo).is_finite() || hi - lo < 1e-12 {
        return Err(PreprocessError::DegenerateInput);
    }
    let scale = 1.0 / (hi - lo);
    for v in out_vol.iter_mut() {
        *v = ((*v - lo) * scale).clamp(0.0, 1.0);
    }
    for k in real_span..td {
        for i in 0..th {
            for j in 0..tw {
                out_seg[[k, i, j]] = LABEL_BACKGROUND;
            }
        }
    }

    let mut pad_mask = vec![true; td];
    for m in pad_mask.iter_mut().skip(real_span) {
        *m = false;
    }
    let grid = VolumeGrid::new(out_vol, tsp, pad_mask)?;
    let mask = SegmentationMask::new(out_seg)?;
    Ok((grid, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generator::{generate_phantom, PhantomSpec, TextureStyle};
    use crate::context::ContextVector;
    use crate::volume::{LABEL_LV, LABEL_MYO};

    fn desk_target() -> PreprocessTarget {
        PreprocessTarget::desk_scale()
    }

    fn phantom_raw(angle: f64, depth: f64, seed: u64) -> RawExam {
        let t = desk_target();
        let mut ctx = ContextVector::zeroed();
        ctx.depth = depth;
        ctx.angle = angle;
        ctx.lv_ed_vol = 150.0;
        ctx.lv_es_vol = 60.0;
        ctx.lv_ef = ContextVector::ef_from_volumes(150.0, 60.0);
        ctx.rv_ed_vol = 140.0;
        ctx.rv_es_vol = 66.0;
        ctx.rv_ef = ContextVector::ef_from_volumes(140.0, 66.0);
        ctx.myo_ed_thickness = 5.7;
        ctx.myo_es_thickness = 8.9;
        let spec = PhantomSpec {
            context: ctx,
            seed,
            dims: t.dims,
            spacing: t.spacing,
            texture: TextureStyle::private_default(),
        };
        let (vol, mask, _) = generate_phantom(&spec).unwrap();
        let real = vol.real_depth();
        RawExam {
            volume: vol.data,
            spacing: t.spacing,
            seg: Some(mask.labels),
            real_depth: Some(real),
        }
    }

    #[test]
    fn centered_symmetric_input_is_identity_after_normalization() {
        // A symmetric shell has its mass centroid exactly at the grid
        // center and no RV, so every correction snaps to zero.
        let t = desk_target();
        let [d, h, w] = t.dims;
        let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
        let mut vol = ndarray::Array3::zeros((d, h, w));
        let mut seg = ndarray::Array3::from_elem((d, h, w), 0u8);
        for k in 0..d {
            for i in 0..h {
                for j in 0..w {
                    let r = ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt();
                    vol[[k, i, j]] = (r as f32 / 20.0).min(1.0) * 0.8 + 0.1;
                    if r < 3.0 {
                        seg[[k, i, j]] = LABEL_LV;
                    } else if r < 5.0 {
                        seg[[k, i, j]] = LABEL_MYO;
                    }
                }
            }
        }
        let raw = RawExam { volume: vol.clone(), spacing: t.spacing, seg: Some(seg), real_depth: None };
        let (out, _) = preprocess(&raw, &t).unwrap();
        // Expected: plain min-max of the input.
        let lo = vol.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = vol.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        for (a, &b) in out.data.iter().zip(vol.iter()) {
            assert!((a - (b - lo) / (hi - lo)).abs() < 1e-6);
        }
    }

    #[test]
    fn idempotent_on_rotated_phantom() {
        let t = desk_target();
        let raw = phantom_raw(25.0, 7.0, 21);
        let (once, seg_once) = preprocess(&raw, &t).unwrap();
        let raw2 = RawExam {
            volume: once.data.clone(),
            spacing: t.spacing,
            seg: Some(seg_once.labels.clone()),
            real_depth: Some(once.real_depth()),
        };
        let (twice, _) = preprocess(&raw2, &t).unwrap();
        for (a, b) in once.data.iter().zip(twice.data.iter()) {
            assert!((a - b).abs() < 1e-6, "second pass changed a voxel: {a} vs {b}");
        }
    }

    #[test]
    fn canonicalizes_rotation() {
        let t = desk_target();
        let raw = phantom_raw(30.0, 7.0, 33);
        let (_, seg_out) = preprocess(&raw, &t).unwrap();
        let (theta, _) = estimate_pose(&seg_out.labels, t.spacing, 7).unwrap();
        assert!(theta.abs().to_degrees() < 3.0, "residual axis angle {}", theta.to_degrees());
    }

    #[test]
    fn short_stack_gets_mean_padding() {
        let t = desk_target();
        let raw = phantom_raw(0.0, 5.0, 8);
        let (out, _) = preprocess(&raw, &t).unwrap();
        assert_eq!(out.depth(), 7);
        assert_eq!(out.real_depth(), 5);
        assert_eq!(out.pad_mask, vec![true, true, true, true, true, false, false]);
        let mean = out.real_mean();
        for k in 5..7 {
            for v in out.data.index_axis(ndarray::Axis(0), k).iter() {
                assert!((v - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn missing_seg_rejected() {
        let t = desk_target();
        let mut raw = phantom_raw(0.0, 7.0, 2);
        raw.seg = None;
        assert!(matches!(preprocess(&raw, &t), Err(PreprocessError::MissingSegmentation)));
    }

    #[test]
    fn constant_volume_rejected() {
        let t = desk_target();
        let mut raw = phantom_raw(0.0, 7.0, 2);
        raw.volume.fill(0.5);
        assert!(matches!(preprocess(&raw, &t), Err(PreprocessError::DegenerateInput)));
    }
}
