//! Per-sample gradient mechanics for differentially private training.
//!
//! The mechanism per step: Poisson-sample a batch, compute each sample's
//! gradient separately, clip each to L2 norm `C`, sum, add isotropic
//! Gaussian noise of scale `σ·C`, and divide by the *expected* lot size.
//! The divisor must be a data-independent constant — normalizing by the
//! realized batch length would make the release depend on how many records
//! the sampler drew, which the accountant's analysis does not cover.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nn::GradBuf;

/// Clips `g` in place to L2 norm at most `clip`; returns the pre-clip norm.
/// An infinite `clip` disables clipping exactly (no arithmetic applied).
pub fn clip_per_sample(g: &mut GradBuf, clip: f64) -> f64 {
    let norm = g.l2_norm();
    if clip.is_finite() && norm > clip {
        g.scale((clip / norm) as f32);
    }
    norm
}

/// Noises the accumulated clipped sum and scales it to a mean over
/// `lot_size`. With `sigma == 0` no randomness is consumed and the result
/// is exactly the clipped mean.
pub fn noise_and_aggregate(
    acc: &mut GradBuf,
    clip: f64,
    sigma: f64,
    lot_size: usize,
    rng: &mut ChaCha8Rng,
) {
    if sigma > 0.0 {
        debug_assert!(clip.is_finite(), "noise scale needs a finite clip norm");
        let std = sigma * clip;
        for v in acc.flat_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += (std * n) as f32;
        }
    }
    acc.scale(1.0 / lot_size as f32);
}

/// Poisson subsampling: includes each of `n` indices independently with
/// probability `q`.
pub fn poisson_sample(n: usize, q: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!((0.0..=1.0).contains(&q), "sample rate {q} outside [0, 1]");
    (0..n).filter(|_| rng.random_bool(q)).collect()
}
