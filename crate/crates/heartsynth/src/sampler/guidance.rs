//! Classifier-free guidance.
//!
//! The combined prediction is ε̂ = ε̂_cond + G·(ε̂_cond − ε̂_null): at
//! G = 0 the conditional branch is returned untouched (and the null branch
//! is never evaluated — one model call, bit-identical output), while
//! larger G extrapolates away from the unconditional prediction.

use ndarray::Array4;

use crate::diffusion::unet::Denoiser;
use crate::nn::ParamStore;
use crate::sampler::SamplerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Null,
}

/// Anything that can predict noise for a latent at a timestep. The real
/// implementation wraps a denoiser with fixed context matrices; tests use
/// counting stubs to pin the evaluation-count contract.
pub trait NoisePredictor {
    fn predict(&mut self, x_t: &Array4<f32>, t: usize, branch: Branch) -> Array4<f32>;
    /// Whether an unconditional branch exists (trained via context dropout).
    fn has_null(&self) -> bool;
}

/// ε̂_cond + G·(ε̂_cond − ε̂_null), elementwise in f32.
pub fn cfg_combine(cond: &Array4<f32>, null: &Array4<f32>, g: f64) -> Array4<f32> {
    let gf = g as f32;
    let mut out = cond.clone();
    for (o, n) in out.iter_mut().zip(null.iter()) {
        *o += gf * (*o - *n);
    }
    out
}

/// One guided prediction. G = 0 short-circuits to a single conditional
/// evaluation; G > 0 evaluates both branches exactly once.
pub fn guided_noise<P: NoisePredictor>(
    p: &mut P,
    x_t: &Array4<f32>,
    t: usize,
    g: f64,
) -> Result<Array4<f32>, SamplerError> {
    if !g.is_finite() || g < 0.0 {
        return Err(SamplerError::BadGuidance(g));
    }
    if g == 0.0 {
        return Ok(p.predict(x_t, t, Branch::Conditional));
    }
    if !p.has_null() {
        return Err(SamplerError::NoNullBranch);
    }
    let cond = p.predict(x_t, t, Branch::Conditional);
    let null = p.predict(x_t, t, Branch::Null);
    Ok(cfg_combine(&cond, &null, g))
}

/// Denoiser with its per-sample conditional tokens (and the shared null
/// tokens when the model was trained with dropout).
pub struct DenoiserPredictor<'a> {
    pub net: &'a Denoiser,
    pub ps: &'a ParamStore,
    pub ctx_cond: ndarray::Array2<f32>,
    pub ctx_null: Option<ndarray::Array2<f32>>,
    pub pad_mask: &'a [bool],
}

impl NoisePredictor for DenoiserPredictor<'_> {
    fn predict(&mut self, x_t: &Array4<f32>, t: usize, branch: Branch) -> Array4<f32> {
        let ctx = match branch {
            Branch::Conditional => &self.ctx_cond,
            Branch::Null => self.ctx_null.as_ref().expect("guided_noise checks has_null"),
        };
        self.net.forward(self.ps, x_t, t, ctx, self.pad_mask).0
    }

    fn has_null(&self) -> bool {
        self.ctx_null.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed-output stub that counts evaluations per branch.
    struct Stub {
        cond: Array4<f32>,
        null: Array4<f32>,
        with_null: bool,
        cond_calls: usize,
        null_calls: usize,
    }

    impl Stub {
        fn new(cond_val: f32, null_val: f32, with_null: bool) -> Self {
            Self {
                cond: Array4::from_elem((2, 3, 4, 4), cond_val),
                null: Array4::from_elem((2, 3, 4, 4), null_val),
                with_null,
                cond_calls: 0,
                null_calls: 0,
            }
        }
    }

    impl NoisePredictor for Stub {
        fn predict(&mut self, _x: &Array4<f32>, _t: usize, branch: Branch) -> Array4<f32> {
            match branch {
                Branch::Conditional => {
                    self.cond_calls += 1;
                    self.cond.clone()
                }
                Branch::Null => {
                    self.null_calls += 1;
                    self.null.clone()
                }
            }
        }

        fn has_null(&self) -> bool {
            self.with_null
        }
    }

    fn zeros() -> Array4<f32> {
        Array4::zeros((2, 3, 4, 4))
    }

    #[test]
    fn zero_guidance_is_one_bitexact_conditional_eval() {
        let mut s = Stub::new(0.37, -1.4, true);
        let out = guided_noise(&mut s, &zeros(), 5, 0.0).unwrap();
        assert_eq!(s.cond_calls, 1);
        assert_eq!(s.null_calls, 0, "null branch must not run at G = 0");
        for (&o, &c) in out.iter().zip(s.cond.iter()) {
            assert_eq!(o.to_bits(), c.to_bits());
        }
    }

    #[test]
    fn guided_arithmetic_is_exact_on_stubs() {
        // cond = 2, null = 1: G = 1 → 3, G = 7 → 9, G = 0.5 → 2.5.
        for (g, want) in [(1.0, 3.0f32), (7.0, 9.0), (0.5, 2.5)] {
            let mut s = Stub::new(2.0, 1.0, true);
            let out = guided_noise(&mut s, &zeros(), 0, g).unwrap();
            assert_eq!(s.cond_calls, 1);
            assert_eq!(s.null_calls, 1, "exactly two evaluations at G > 0");
            for &v in out.iter() {
                assert_eq!(v, want, "G = {g}");
            }
        }
    }

    #[test]
    fn equal_branches_make_guidance_inert() {
        for g in [0.0, 1.0, 3.0, 7.0] {
            let mut s = Stub::new(0.8, 0.8, true);
            let out = guided_noise(&mut s, &zeros(), 2, g).unwrap();
            for &v in out.iter() {
                assert_eq!(v, 0.8, "G = {g} must not move equal branches");
            }
        }
    }

    #[test]
    fn missing_null_branch_refused_only_when_needed() {
        let mut s = Stub::new(1.0, 0.0, false);
        assert!(guided_noise(&mut s, &zeros(), 0, 0.0).is_ok());
        let err = guided_noise(&mut s, &zeros(), 0, 2.0).unwrap_err();
        assert!(matches!(err, SamplerError::NoNullBranch));
        assert_eq!(s.null_calls, 0);
    }

    #[test]
    fn negative_or_nan_guidance_rejected() {
        let mut s = Stub::new(1.0, 0.0, true);
        assert!(matches!(
            guided_noise(&mut s, &zeros(), 0, -1.0),
            Err(SamplerError::BadGuidance(_))
        ));
        assert!(matches!(
            guided_noise(&mut s, &zeros(), 0, f64::NAN),
            Err(SamplerError::BadGuidance(_))
        ));
    }

    #[test]
    fn output_moves_continuously_in_guidance() {
        let base = 3.0;
        let mut s = Stub::new(1.3, -0.2, true);
        let at = |s: &mut Stub, g: f64| guided_noise(s, &zeros(), 1, g).unwrap();
        let y0 = at(&mut s, base);
        let gap = s.cond[[0, 0, 0, 0]] - s.null[[0, 0, 0, 0]];
        for dg in [1e-2, 1e-3, 1e-4] {
            let y1 = at(&mut s, base + dg);
            let diff = y1
                .iter()
                .zip(y0.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            let expect = dg as f32 * gap.abs();
            assert!(
                (diff - expect).abs() <= expect * 1e-2 + 1e-6,
                "dg = {dg}: moved {diff}, expected {expect}"
            );
        }
    }

    #[test]
    fn real_predictor_zero_guidance_matches_direct_forward() {
        use crate::diffusion::unet::DenoiserConfig;
        use crate::nn::ParamStore;
        let mut ps = ParamStore::new(77);
        let cfg = DenoiserConfig {
            latent_channels: 2,
            channels: [8, 8, 16],
            heads: 2,
            context_dim: 8,
            t_embed_dim: 16,
            depth_embeddings: true,
        };
        let net = Denoiser::new(&mut ps, cfg);
        let ctx = crate::context::ContextVector::zeroed();
        let (ctx_mat, _) = net.context.forward(&ps, &ctx);
        let pad = vec![true, true, false];
        let x = Array4::from_elem((2, 3, 4, 4), 0.25f32);
        let direct = net.forward(&ps, &x, 7, &ctx_mat, &pad).0;
        let mut pred = DenoiserPredictor {
            net: &net,
            ps: &ps,
            ctx_cond: ctx_mat,
            ctx_null: Some(net.context.null_embedding(&ps)),
            pad_mask: &pad,
        };
        let guided = guided_noise(&mut pred, &x, 7, 0.0).unwrap();
        for (a, b) in guided.iter().zip(direct.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
