//! Training-time augmentation: random in-plane scale, rotation, and
//! shift. Depth is never touched and the pad mask rides through.

use ndarray::Array3;
use rand::Rng;

use crate::volume::VolumeGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// Draw ranges. Degenerate ranges (lo == hi) force that exact draw, which
/// is how the identity contract is exercised.
#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    pub scale_range: (f64, f64),
    pub rot_range_deg: (f64, f64),
    pub shift_range_px: (f64, f64),
    pub interp: Interp,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_range: (0.9, 1.1),
            rot_range_deg: (-15.0, 15.0),
            shift_range_px: (-5.0, 5.0),
            interp: Interp::Bilinear,
        }
    }
}

/// Applies one random in-plane affine draw. The identity draw returns a
/// bit-equal copy.
pub fn augment(v: &VolumeGrid, rng: &mut impl Rng, cfg: &AugmentConfig) -> VolumeGrid {
    let scale = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
    let theta = rng.random_range(cfg.rot_range_deg.0..=cfg.rot_range_deg.1).to_radians();
    let dy = rng.random_range(cfg.shift_range_px.0..=cfg.shift_range_px.1);
    let dx = rng.random_range(cfg.shift_range_px.0..=cfg.shift_range_px.1);
    apply_affine(v, scale, theta, (dy, dx), cfg.interp)
}

/// Deterministic core: scale then rotate about the slice center, then
/// shift by (dy, dx) voxels.
pub fn apply_affine(
    v: &VolumeGrid,
    scale: f64,
    theta: f64,
    shift: (f64, f64),
    interp: Interp,
) -> VolumeGrid {
    if scale == 1.0 && theta == 0.0 && shift == (0.0, 0.0) {
        return v.clone();
    }
    let (d, h, w) = (v.depth(), v.height(), v.width());
    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let mut out = Array3::zeros((d, h, w));
    for k in 0..d {
        let slice = v.data.index_axis(ndarray::Axis(0), k);
        for i in 0..h {
            let oy = i as f64 - cy - shift.0;
            for j in 0..w {
                let ox = j as f64 - cx - shift.1;
                // Inverse map of shift∘rotate∘scale.
                let sy = cy + (oy * cos_t + ox * sin_t) / scale;
                let sx = cx + (ox * cos_t - oy * sin_t) / scale;
                let val = match interp {
                    Interp::Bilinear => {
                        let yc = sy.max(0.0).min((h - 1) as f64);
                        let xc = sx.max(0.0).min((w - 1) as f64);
                        let (y0, x0) = (yc.floor() as usize, xc.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                        let (fy, fx) = ((yc - y0 as f64) as f32, (xc - x0 as f64) as f32);
                        let top = slice[[y0, x0]] + (slice[[y0, x1]] - slice[[y0, x0]]) * fx;
                        let bot = slice[[y1, x0]] + (slice[[y1, x1]] - slice[[y1, x0]]) * fx;
                        top + (bot - top) * fy
                    }
                    Interp::Nearest => {
                        let yi = (sy.round().max(0.0) as usize).min(h - 1);
                        let xi = (sx.round().max(0.0) as usize).min(w - 1);
                        slice[[yi, xi]]
                    }
                };
                out[[k, i, j]] = val.clamp(0.0, 1.0);
            }
        }
    }
    VolumeGrid::new(out, v.spacing, v.pad_mask.clone()).expect("affine output stays in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disk_volume() -> VolumeGrid {
        let (d, h, w) = (3, 32, 32);
        let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
        let mut data = Array3::zeros((d, h, w));
        for k in 0..d {
            for i in 0..h {
                for j in 0..w {
                    let r = ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt();
                    data[[k, i, j]] = if r < 10.0 { 1.0 } else { 0.0 };
                }
            }
        }
        VolumeGrid::all_real(data, [10.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn identity_draw_is_bit_equal() {
        let v = disk_volume();
        let cfg = AugmentConfig {
            scale_range: (1.0, 1.0),
            rot_range_deg: (0.0, 0.0),
            shift_range_px: (0.0, 0.0),
            interp: Interp::Bilinear,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(&v, &mut rng, &cfg);
        assert_eq!(
            v.data.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
            out.data.iter().map(|f| f.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rotate_there_and_back_keeps_iou() {
        let v = disk_volume();
        let theta = 12.0f64.to_radians();
        let fwd = apply_affine(&v, 1.0, theta, (0.0, 0.0), Interp::Nearest);
        let back = apply_affine(&fwd, 1.0, -theta, (0.0, 0.0), Interp::Nearest);
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in v.data.iter().zip(back.data.iter()) {
            let (pa, pb) = (*a > 0.5, *b > 0.5);
            if pa && pb {
                inter += 1;
            }
            if pa || pb {
                union += 1;
            }
        }
        let iou = inter as f64 / union as f64;
        assert!(iou >= 0.95, "IoU {iou}");
    }

    #[test]
    fn outputs_stay_clipped() {
        let v = disk_volume();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let out = augment(&v, &mut rng, &AugmentConfig::default());
            for &val in out.data.iter() {
                assert!((0.0..=1.0).contains(&val));
            }
        }
    }

    #[test]
    fn pad_mask_preserved() {
        let mut v = disk_volume();
        v.pad_mask = vec![true, true, false];
        v.apply_mean_padding();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = augment(&v, &mut rng, &AugmentConfig::default());
        assert_eq!(out.pad_mask, vec![true, true, false]);
    }
}
