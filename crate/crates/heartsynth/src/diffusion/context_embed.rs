//! Attribute-conditioning encoder.
//!
//! Each of the 14 scalar attributes is z-scored against fixed population
//! statistics and lifted to its own embedding token by a per-attribute
//! affine map; one self-attention block then mixes the tokens so that
//! coupled attributes (volumes and their ejection fraction, say) can
//! inform each other's embedding. The output is a `[14, E]` matrix that
//! the denoiser cross-attends to.
//!
//! Dropping the condition does not zero this matrix — a learned
//! null-context embedding of the same shape stands in for "no
//! information", and it never sees the input.

use ndarray::Array2;

use crate::context::{normalize_context, AttributeStats, ContextVector, NUM_ATTRIBUTES};
use crate::nn::{AttentionCache, GradBuf, MultiHeadAttention, ParamId, ParamStore};

/// Width of each attribute token.
pub const DEFAULT_EMBED_DIM: usize = 16;

#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub(crate) token_w: ParamId,
    token_b: ParamId,
    attn: MultiHeadAttention,
    null_ctx: ParamId,
    pub embed_dim: usize,
    stats: AttributeStats,
}

#[derive(Debug)]
pub struct ContextCache {
    z: [f64; NUM_ATTRIBUTES],
    attn: AttentionCache,
}

impl ContextEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, embed_dim: usize) -> Self {
        assert!(embed_dim % 2 == 0, "embed dim must be even");
        let token_w = ps.register_normal(&format!("{name}.token_w"), NUM_ATTRIBUTES * embed_dim, 0.5);
        let token_b = ps.register_normal(&format!("{name}.token_b"), NUM_ATTRIBUTES * embed_dim, 0.5);
        let attn = MultiHeadAttention::new(
            ps,
            &format!("{name}.mix"),
            embed_dim,
            embed_dim,
            2,
            embed_dim / 2,
        );
        let null_ctx = ps.register_normal(&format!("{name}.null"), NUM_ATTRIBUTES * embed_dim, 0.5);
        Self { token_w, token_b, attn, null_ctx, embed_dim, stats: AttributeStats::population() }
    }

    /// Encode one attribute vector to `[14, E]`.
    pub fn forward(&self, ps: &ParamStore, ctx: &ContextVector) -> (Array2<f32>, ContextCache) {
        let z = normalize_context(ctx, &self.stats);
        let e = self.embed_dim;
        let w = ps.get(self.token_w);
        let b = ps.get(self.token_b);
        let mut tokens = Array2::zeros((NUM_ATTRIBUTES, e));
        for i in 0..NUM_ATTRIBUTES {
            for j in 0..e {
                tokens[[i, j]] = (z[i] as f32) * w[i * e + j] + b[i * e + j];
            }
        }
        let (mixed, attn_cache) = self.attn.forward(ps, &tokens, &tokens, None, None, None);
        let out = &tokens + &mixed;
        (out, ContextCache { z, attn: attn_cache })
    }

    /// The input-independent stand-in used when conditioning is dropped.
    pub fn null_embedding(&self, ps: &ParamStore) -> Array2<f32> {
        Array2::from_shape_vec(
            (NUM_ATTRIBUTES, self.embed_dim),
            ps.get(self.null_ctx).to_vec(),
        )
        .expect("null shape")
    }

    pub fn backward(&self, ps: &ParamStore, g: &mut GradBuf, cache: &ContextCache, dout: &Array2<f32>) {
        let (dxq, dxkv) = self.attn.backward(ps, g, &cache.attn, dout);
        let d_tokens = dout + &dxq + &dxkv;
        let e = self.embed_dim;
        let gw = g.get_mut(self.token_w);
        for i in 0..NUM_ATTRIBUTES {
            for j in 0..e {
                gw[i * e + j] += d_tokens[[i, j]] * cache.z[i] as f32;
            }
        }
        let gb = g.get_mut(self.token_b);
        for i in 0..NUM_ATTRIBUTES {
            for j in 0..e {
                gb[i * e + j] += d_tokens[[i, j]];
            }
        }
    }

    pub fn null_backward(&self, g: &mut GradBuf, dnull: &Array2<f32>) {
        let gn = g.get_mut(self.null_ctx);
        for (acc, v) in gn.iter_mut().zip(dnull.iter()) {
            *acc += v;
        }
    }

    #[cfg(test)]
    pub(crate) fn null_param_for_tests(&self) -> ParamId {
        self.null_ctx
    }
}
