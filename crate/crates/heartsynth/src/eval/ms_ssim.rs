//! Multi-scale structural similarity, used as a diversity proxy.
//!
//! Sample diversity is scored by averaging MS-SSIM over random pairs of
//! volumes: identical samples score 1, and the more the pairs differ the
//! lower the mean. Each pair is compared slice-by-slice on the central
//! stack, per slice across a dyadic pyramid — contrast/structure at every
//! scale, luminance only at the coarsest, exponents from the standard
//! five-scale weight vector renormalized to the scales in use.
//!
//! The pyramid downsamples by stride-2 decimation rather than 2×2 mean
//! pooling. Pooling shrinks the variance of independent pixel noise
//! fourfold per level, so at coarse scales the stabilizing constant in the
//! contrast term dominates and two unrelated noise volumes would score
//! ≈0.08 instead of ≈0; decimation keeps per-scale statistics stationary,
//! which preserves the "independent inputs score near zero" anchor the
//! diversity reading depends on.

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

use crate::volume::VolumeGrid;

use super::features::central_slices;
use super::EvalError;

/// Standard five-scale MS-SSIM exponent weights, finest first.
const WANG_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Stabilizers for unit dynamic range: `C1 = (0.01)²`, `C2 = (0.03)²`.
const C1: f64 = 1e-4;
const C2: f64 = 9e-4;

const WINDOW: usize = 7;
const WINDOW_SIGMA: f64 = 1.5;

/// Number of pyramid scales for a slice of `min(H, W) = size`: five from
/// 96² up, three from 32², too small below that.
fn scale_count(size: usize) -> Result<usize, EvalError> {
    if size >= 96 {
        Ok(5)
    } else if size >= 32 {
        Ok(3)
    } else {
        Err(EvalError::TooSmallForPyramid { size, min: 32 })
    }
}

fn gaussian_window() -> [f64; WINDOW * WINDOW] {
    let mut w = [0.0; WINDOW * WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..WINDOW {
        for x in 0..WINDOW {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dy * dy + dx * dx) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
            w[y * WINDOW + x] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

struct SliceStats {
    luminance: f64,
    contrast_structure: f64,
}

/// Mean luminance and contrast/structure comparison over all window
/// positions of one slice pair. Slices smaller than the window fall back
/// to a single global-statistics window.
fn ssim_components(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> SliceStats {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let mut l_sum = 0.0f64;
    let mut cs_sum = 0.0f64;
    let mut count = 0usize;

    let mut accumulate = |mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64| {
        let l = (2.0 * mu_a * mu_b + C1) / (mu_a * mu_a + mu_b * mu_b + C1);
        let cs = (2.0 * cov + C2) / (var_a + var_b + C2);
        l_sum += l;
        cs_sum += cs;
        count += 1;
    };

    if h < WINDOW || w < WINDOW {
        let n = (h * w) as f64;
        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b.iter()) {
            let (x, y) = (x as f64, y as f64);
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        }
        let (mu_a, mu_b) = (sa / n, sb / n);
        accumulate(
            mu_a,
            mu_b,
            (saa / n - mu_a * mu_a).max(0.0),
            (sbb / n - mu_b * mu_b).max(0.0),
            sab / n - mu_a * mu_b,
        );
    } else {
        let win = gaussian_window();
        for oy in 0..=h - WINDOW {
            for ox in 0..=w - WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..WINDOW {
                    for kx in 0..WINDOW {
                        let g = win[ky * WINDOW + kx];
                        let x = a[[oy + ky, ox + kx]] as f64;
                        let y = b[[oy + ky, ox + kx]] as f64;
                        sa += g * x;
                        sb += g * y;
                        saa += g * x * x;
                        sbb += g * y * y;
                        sab += g * x * y;
                    }
                }
                accumulate(
                    sa,
                    sb,
                    (saa - sa * sa).max(0.0),
                    (sbb - sb * sb).max(0.0),
                    sab - sa * sb,
                );
            }
        }
    }
    SliceStats { luminance: l_sum / count as f64, contrast_structure: cs_sum / count as f64 }
}

fn decimate2(x: &Array2<f32>) -> Array2<f32> {
    x.slice(s![..;2, ..;2]).to_owned()
}

/// MS-SSIM of one slice pair across the pyramid.
fn ms_ssim_slice(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<f64, EvalError> {
    let scales = scale_count(a.shape()[0].min(a.shape()[1]))?;
    let weight_sum: f64 = WANG_WEIGHTS[..scales].iter().sum();
    let mut cur_a = a.to_owned();
    let mut cur_b = b.to_owned();
    let mut score = 1.0f64;
    for (level, raw_w) in WANG_WEIGHTS[..scales].iter().enumerate() {
        let stats = ssim_components(&cur_a.view(), &cur_b.view());
        let weight = raw_w / weight_sum;
        let mut factor = stats.contrast_structure;
        if level == scales - 1 {
            factor *= stats.luminance;
        }
        score *= factor.max(0.0).powf(weight);
        if level + 1 < scales {
            cur_a = decimate2(&cur_a);
            cur_b = decimate2(&cur_b);
        }
    }
    Ok(score)
}

/// MS-SSIM between two volumes: per central slice, averaged.
pub fn ms_ssim_pair(a: &VolumeGrid, b: &VolumeGrid, k: usize) -> Result<f64, EvalError> {
    let sa = central_slices(a, k)?;
    let sb = central_slices(b, k)?;
    if sa.shape() != sb.shape() {
        return Err(EvalError::VolumeShapeMismatch {
            left: [sa.shape()[0], sa.shape()[1], sa.shape()[2]],
            right: [sb.shape()[0], sb.shape()[1], sb.shape()[2]],
        });
    }
    let mut sum = 0.0f64;
    for d in 0..k {
        sum += ms_ssim_slice(sa.slice(s![d, .., ..]), sb.slice(s![d, .., ..]))?;
    }
    Ok(sum / k as f64)
}

/// Mean MS-SSIM over random distinct pairs; lower means more diverse.
///
/// When the requested pair count covers every unordered pair, all pairs
/// are scored once instead of sampling.
pub fn ms_ssim_diversity(
    volumes: &[VolumeGrid],
    pair_count: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, EvalError> {
    let n = volumes.len();
    if n < 2 {
        return Err(EvalError::TooFewVolumes { have: n, need: 2 });
    }
    let all_pairs = n * (n - 1) / 2;
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    if pair_count >= all_pairs {
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j));
            }
        }
    } else {
        let mut seen = HashSet::new();
        while pairs.len() < pair_count {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                pairs.push(key);
            }
        }
    }
    let mut sum = 0.0f64;
    for &(i, j) in &pairs {
        sum += ms_ssim_pair(&volumes[i], &volumes[j], k)?;
    }
    Ok(sum / pairs.len() as f64)
}
