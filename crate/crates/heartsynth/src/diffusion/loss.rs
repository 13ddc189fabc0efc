//! Per-sample denoising objective.
//!
//! One call draws a uniform timestep, corrupts the clean latent, runs the
//! denoiser, and scores the squared ε-prediction error over real slices.
//! With probability `ctx_dropout_p` the attribute tokens are swapped for
//! the learned null embedding — the same network then serves both
//! branches of classifier-free guidance at sampling time.

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::context::ContextVector;
use crate::nn::{GradBuf, ParamStore};

use super::schedule::{forward_diffuse, NoiseSchedule};
use super::unet::Denoiser;

/// Probability of replacing the condition with the null embedding.
pub const CTX_DROPOUT_P: f64 = 0.1;

/// Squared-error mean restricted to real slices; the gradient is zero on
/// padded ones.
pub fn masked_mse_and_grad(
    pred: &Array4<f32>,
    target: &Array4<f32>,
    pad_mask: &[bool],
) -> (f64, Array4<f32>) {
    let (c, h, w) = (pred.shape()[0], pred.shape()[2], pred.shape()[3]);
    let real_d = pad_mask.iter().filter(|m| **m).count();
    assert!(real_d > 0, "no real slices");
    let n = (c * real_d * h * w) as f64;
    let mut loss = 0.0f64;
    let mut grad = Array4::zeros(pred.raw_dim());
    for ci in 0..c {
        for (di, keep) in pad_mask.iter().enumerate() {
            if !keep {
                continue;
            }
            for i in 0..h {
                for j in 0..w {
                    let diff = (pred[[ci, di, i, j]] - target[[ci, di, i, j]]) as f64;
                    loss += diff * diff;
                    grad[[ci, di, i, j]] = (2.0 * diff / n) as f32;
                }
            }
        }
    }
    (loss / n, grad)
}

/// One training (or evaluation) step on a single latent. Draws `t`, ε,
/// and the dropout coin from `rng` in that order; accumulates gradients
/// when `g` is given. Returns the masked ε-MSE.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss(
    net: &Denoiser,
    ps: &ParamStore,
    g: Option<&mut GradBuf>,
    sched: &NoiseSchedule,
    x0: &Array4<f32>,
    ctx: &ContextVector,
    pad_mask: &[bool],
    rng: &mut ChaCha8Rng,
    ctx_dropout_p: f64,
) -> f64 {
    let t = rng.random_range(0..sched.steps());
    let eps = Array4::from_shape_fn(x0.raw_dim(), |_| {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) as f32
    });
    let x_t = forward_diffuse(x0, t, &eps, sched).expect("t in range by construction");
    let dropped = rng.random_bool(ctx_dropout_p);
    if let Some(g) = g {
        let (ctx_mat, ctx_cache) = if dropped {
            (net.context.null_embedding(ps), None)
        } else {
            let (m, c) = net.context.forward(ps, ctx);
            (m, Some(c))
        };
        let (eps_hat, cache) = net.forward(ps, &x_t, t, &ctx_mat, pad_mask);
        let (loss, d_eps) = masked_mse_and_grad(&eps_hat, &eps, pad_mask);
        let (_, dctx) = net.backward(ps, g, &cache, &d_eps);
        match ctx_cache {
            Some(cc) => net.context.backward(ps, g, &cc, &dctx),
            None => net.context.null_backward(g, &dctx),
        }
        loss
    } else {
        let ctx_mat = if dropped {
            net.context.null_embedding(ps)
        } else {
            net.context.forward(ps, ctx).0
        };
        let (eps_hat, _) = net.forward(ps, &x_t, t, &ctx_mat, pad_mask);
        masked_mse_and_grad(&eps_hat, &eps, pad_mask).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::default_schedule;
    use crate::diffusion::unet::DenoiserConfig;
    use crate::nn::Sgd;
    use rand::SeedableRng;

    fn tiny_net(seed: u64) -> (ParamStore, Denoiser) {
        let mut ps = ParamStore::new(seed);
        let cfg = DenoiserConfig {
            latent_channels: 2,
            channels: [8, 8, 16],
            heads: 2,
            context_dim: 8,
            t_embed_dim: 16,
            depth_embeddings: true,
        };
        let net = Denoiser::new(&mut ps, cfg);
        (ps, net)
    }

    fn sample_ctx() -> ContextVector {
        let mut raw = [0.0; crate::context::NUM_ATTRIBUTES];
        raw[0] = 48.0;
        raw[2] = 28.0;
        raw[5] = 12.0;
        raw[6] = 170.0;
        raw[7] = 80.0;
        raw[8] = ContextVector::ef_from_volumes(170.0, 80.0);
        raw[9] = 155.0;
        raw[10] = 70.0;
        raw[11] = ContextVector::ef_from_volumes(155.0, 70.0);
        raw[12] = 8.5;
        raw[13] = 5.2;
        ContextVector::from_raw(raw)
    }

    fn fixed_latent(seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((2, 3, 4, 4), |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn deterministic_given_seed() {
        let (ps, net) = tiny_net(60);
        let sched = default_schedule();
        let x0 = fixed_latent(1);
        let ctx = sample_ctx();
        let pad = vec![true, true, false];
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            diffusion_loss(&net, &ps, None, &sched, &x0, &ctx, &pad, &mut rng, CTX_DROPOUT_P)
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn padded_content_does_not_move_the_loss() {
        let (ps, net) = tiny_net(61);
        let sched = default_schedule();
        let x0 = fixed_latent(2);
        let mut x0b = x0.clone();
        for v in x0b.slice_mut(ndarray::s![.., 2, .., ..]).iter_mut() {
            *v -= 0.7;
        }
        let ctx = sample_ctx();
        let pad = vec![true, true, false];
        let a = diffusion_loss(
            &net, &ps, None, &sched, &x0, &ctx, &pad,
            &mut ChaCha8Rng::seed_from_u64(5), 0.0,
        );
        let b = diffusion_loss(
            &net, &ps, None, &sched, &x0b, &ctx, &pad,
            &mut ChaCha8Rng::seed_from_u64(5), 0.0,
        );
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn dropout_routes_gradient_to_null_embedding() {
        let (ps, net) = tiny_net(62);
        let sched = default_schedule();
        let x0 = fixed_latent(3);
        let ctx = sample_ctx();
        let pad = vec![true; 3];
        let norm_of = |g: &GradBuf, id: crate::nn::ParamId| -> f64 {
            g.get(id).iter().map(|v| (*v as f64).powi(2)).sum::<f64>()
        };
        // Always dropped: null gets gradient, per-attribute maps do not.
        let mut g = ps.grads();
        diffusion_loss(&net, &ps, Some(&mut g), &sched, &x0, &ctx, &pad,
            &mut ChaCha8Rng::seed_from_u64(6), 1.0);
        assert!(norm_of(&g, net.context.null_param_for_tests()) > 0.0);
        assert_eq!(norm_of(&g, net.context.token_w), 0.0);
        // Never dropped: the reverse.
        let mut g2 = ps.grads();
        diffusion_loss(&net, &ps, Some(&mut g2), &sched, &x0, &ctx, &pad,
            &mut ChaCha8Rng::seed_from_u64(6), 0.0);
        assert_eq!(norm_of(&g2, net.context.null_param_for_tests()), 0.0);
        assert!(norm_of(&g2, net.context.token_w) > 0.0);
    }

    #[test]
    fn short_training_run_reduces_loss() {
        let (mut ps, net) = tiny_net(63);
        let sched = default_schedule();
        let x0 = fixed_latent(4);
        let ctx = sample_ctx();
        let pad = vec![true; 3];
        let eval = |ps: &ParamStore| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100);
            (0..20)
                .map(|_| diffusion_loss(&net, ps, None, &sched, &x0, &ctx, &pad, &mut rng, 0.0))
                .sum::<f64>()
                / 20.0
        };
        let before = eval(&ps);
        let sgd = Sgd::new(0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        for _ in 0..120 {
            let mut g = ps.grads();
            diffusion_loss(&net, &ps, Some(&mut g), &sched, &x0, &ctx, &pad, &mut rng, 0.1);
            sgd.step(&mut ps, &g);
        }
        let after = eval(&ps);
        assert!(
            after < before * 0.9,
            "loss did not improve: before {before}, after {after}"
        );
    }
}
