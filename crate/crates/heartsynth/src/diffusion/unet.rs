//! Conditional 3D denoiser.
//!
//! A three-level U-Net over `[C, D, H, W]` latents. All convolutions are
//! 1×3×3 and both striding and upsampling act in-plane only, so the
//! depth axis keeps its length from input to output — short stacks stay
//! short. Slices talk to each other exclusively through depth-wise
//! self-attention at the two coarsest levels, where sinusoidal depth
//! codes (added to queries and keys) break permutation symmetry and a
//! pad mask keeps padded slices from serving as keys. The same blocks
//! cross-attend to the `[14, E]` attribute tokens.

use ndarray::{s, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::nn::{
    concat_channels, from_tokens, silu, silu_grad, sinusoidal_embedding, to_tokens, upsample2x,
    upsample2x_backward, AttentionCache, Conv1x1, Conv1x3x3, GradBuf, GroupNorm, GroupNormCache,
    Linear, MultiHeadAttention, ParamStore,
};

use super::context_embed::{ContextEncoder, DEFAULT_EMBED_DIM};

const GN_GROUPS: usize = 8;

/// Architecture knobs. `channels` are per level, shallow to deep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub channels: [usize; 3],
    pub heads: usize,
    pub context_dim: usize,
    pub t_embed_dim: usize,
    /// When false the depth attention runs without positional codes;
    /// the network is then permutation-equivariant along depth.
    pub depth_embeddings: bool,
}

impl DenoiserConfig {
    pub fn full_scale() -> Self {
        Self {
            latent_channels: 4,
            channels: [128, 256, 384],
            heads: 8,
            context_dim: DEFAULT_EMBED_DIM,
            t_embed_dim: 128,
            depth_embeddings: true,
        }
    }

    /// Sized for commodity-CPU training runs.
    pub fn desk_scale() -> Self {
        Self {
            latent_channels: 4,
            channels: [32, 48, 64],
            heads: 4,
            context_dim: DEFAULT_EMBED_DIM,
            t_embed_dim: 128,
            depth_embeddings: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv1x3x3,
    lin_t: Linear,
    gn2: GroupNorm,
    conv2: Conv1x3x3,
    skip: Option<Conv1x1>,
}

#[derive(Debug)]
struct ResBlockCache {
    x: Array4<f32>,
    gn1: GroupNormCache,
    n1: Array4<f32>,
    a1: Array4<f32>,
    gn2: GroupNormCache,
    n2: Array4<f32>,
    a2: Array4<f32>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, tdim: usize) -> Self {
        Self {
            gn1: GroupNorm::new(ps, &format!("{name}.gn1"), cin, GN_GROUPS),
            conv1: Conv1x3x3::new(ps, &format!("{name}.conv1"), cin, cout, 1),
            lin_t: Linear::new(ps, &format!("{name}.temb"), tdim, cout),
            gn2: GroupNorm::new(ps, &format!("{name}.gn2"), cout, GN_GROUPS),
            conv2: Conv1x3x3::new(ps, &format!("{name}.conv2"), cout, cout, 1),
            skip: if cin == cout { None } else { Some(Conv1x1::new(ps, &format!("{name}.skip"), cin, cout)) },
        }
    }

    fn forward(
        &self,
        ps: &ParamStore,
        x: &Array4<f32>,
        temb_silu: &Array2<f32>,
        pad_mask: &[bool],
    ) -> (Array4<f32>, ResBlockCache) {
        let (n1, gn1c) = self.gn1.forward_masked(ps, x, pad_mask);
        let a1 = n1.mapv(silu);
        let mut h = self.conv1.forward(ps, &a1);
        let tproj = self.lin_t.forward(ps, temb_silu); // [1, cout]
        for (c, mut plane) in h.outer_iter_mut().enumerate() {
            let b = tproj[[0, c]];
            for v in plane.iter_mut() {
                *v += b;
            }
        }
        let (n2, gn2c) = self.gn2.forward_masked(ps, &h, pad_mask);
        let a2 = n2.mapv(silu);
        let h2 = self.conv2.forward(ps, &a2);
        let y = match &self.skip {
            Some(sk) => h2 + sk.forward(ps, x),
            None => h2 + x,
        };
        (y, ResBlockCache { x: x.clone(), gn1: gn1c, n1, a1, gn2: gn2c, n2, a2 })
    }

    /// Returns (dx, d_temb_silu).
    fn backward(
        &self,
        ps: &ParamStore,
        g: &mut GradBuf,
        cache: &ResBlockCache,
        temb_silu: &Array2<f32>,
        dy: &Array4<f32>,
    ) -> (Array4<f32>, Array2<f32>) {
        let da2 = self.conv2.backward(ps, g, &cache.a2, dy);
        let dn2 = &da2 * &cache.n2.mapv(silu_grad);
        let dh = self.gn2.backward(ps, g, &cache.gn2, &dn2);
        // The time bias broadcast over space: its grad is the spatial sum.
        let cout = dh.shape()[0];
        let mut dtproj = Array2::zeros((1, cout));
        for c in 0..cout {
            dtproj[[0, c]] = dh.slice(s![c, .., .., ..]).iter().sum::<f32>();
        }
        let dtemb_silu = self.lin_t.backward(ps, g, temb_silu, &dtproj);
        let da1 = self.conv1.backward(ps, g, &cache.a1, &dh);
        let dn1 = &da1 * &cache.n1.mapv(silu_grad);
        let mut dx = self.gn1.backward(ps, g, &cache.gn1, &dn1);
        match &self.skip {
            Some(sk) => dx = dx + sk.backward(ps, g, &cache.x, dy),
            None => dx = dx + dy,
        }
        (dx, dtemb_silu)
    }
}

// ---------------------------------------------------------------------------
// Transformer block: depth self-attention + context cross-attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct TransformerBlock {
    gn_d: GroupNorm,
    depth_attn: MultiHeadAttention,
    gn_x: GroupNorm,
    cross_attn: MultiHeadAttention,
    c: usize,
}

#[derive(Debug)]
struct TransformerCache {
    gn_d: GroupNormCache,
    depth: Vec<AttentionCache>, // one per (h, w) position
    gn_x: GroupNormCache,
    cross: AttentionCache,
    dims: (usize, usize, usize),
}

impl TransformerBlock {
    fn new(ps: &mut ParamStore, name: &str, c: usize, heads: usize, ctx_dim: usize) -> Self {
        assert!(c % heads == 0, "channels {c} not divisible by heads {heads}");
        let hd = c / heads;
        Self {
            gn_d: GroupNorm::new(ps, &format!("{name}.gnd"), c, GN_GROUPS),
            depth_attn: MultiHeadAttention::new(ps, &format!("{name}.depth"), c, c, heads, hd),
            gn_x: GroupNorm::new(ps, &format!("{name}.gnx"), c, GN_GROUPS),
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross"), c, ctx_dim, heads, hd),
            c,
        }
    }

    fn depth_codes(&self, d: usize, enabled: bool) -> Option<Array2<f32>> {
        if !enabled {
            return None;
        }
        let mut pos = Array2::zeros((d, self.c));
        for di in 0..d {
            let row = sinusoidal_embedding(di as f64, self.c);
            for (j, v) in row.into_iter().enumerate() {
                pos[[di, j]] = v;
            }
        }
        Some(pos)
    }

    fn forward(
        &self,
        ps: &ParamStore,
        x: &Array4<f32>,
        ctx: &Array2<f32>,
        pad_mask: &[bool],
        depth_embeddings: bool,
    ) -> (Array4<f32>, TransformerCache) {
        let (c, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        assert_eq!(c, self.c);
        assert_eq!(pad_mask.len(), d, "pad mask length");
        let pos = self.depth_codes(d, depth_embeddings);
        let (nd, gn_d_cache) = self.gn_d.forward_masked(ps, x, pad_mask);
        let mut y1 = x.clone();
        let mut depth_caches = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let mut tokens = Array2::zeros((d, c));
                for di in 0..d {
                    for ci in 0..c {
                        tokens[[di, ci]] = nd[[ci, di, i, j]];
                    }
                }
                let (out, cache) = self.depth_attn.forward(
                    ps,
                    &tokens,
                    &tokens,
                    pos.as_ref(),
                    pos.as_ref(),
                    Some(pad_mask),
                );
                for di in 0..d {
                    for ci in 0..c {
                        y1[[ci, di, i, j]] += out[[di, ci]];
                    }
                }
                depth_caches.push(cache);
            }
        }
        let (nx, gn_x_cache) = self.gn_x.forward_masked(ps, &y1, pad_mask);
        let tokens = to_tokens(&nx);
        let (out, cross_cache) = self.cross_attn.forward(ps, &tokens, ctx, None, None, None);
        let y = &y1 + &from_tokens(&out, d, h, w);
        (
            y,
            TransformerCache { gn_d: gn_d_cache, depth: depth_caches, gn_x: gn_x_cache, cross: cross_cache, dims: (d, h, w) },
        )
    }

    /// Returns (dx, d_ctx).
    fn backward(
        &self,
        ps: &ParamStore,
        g: &mut GradBuf,
        cache: &TransformerCache,
        dy: &Array4<f32>,
    ) -> (Array4<f32>, Array2<f32>) {
        let (d, h, w) = cache.dims;
        let c = self.c;
        // Cross-attention residual.
        let (dtok, dctx) = self.cross_attn.backward(ps, g, &cache.cross, &to_tokens(dy));
        let dnx = from_tokens(&dtok, d, h, w);
        let dy1 = dy + &self.gn_x.backward(ps, g, &cache.gn_x, &dnx);
        // Depth-attention residual.
        let mut dnd = Array4::zeros(dy.raw_dim());
        for i in 0..h {
            for j in 0..w {
                let mut dout = Array2::zeros((d, c));
                for di in 0..d {
                    for ci in 0..c {
                        dout[[di, ci]] = dy1[[ci, di, i, j]];
                    }
                }
                let (dq_tok, dkv_tok) = self.depth_attn.backward(ps, g, &cache.depth[i * w + j], &dout);
                let dtok = dq_tok + dkv_tok;
                for di in 0..d {
                    for ci in 0..c {
                        dnd[[ci, di, i, j]] += dtok[[di, ci]];
                    }
                }
            }
        }
        let dx = &dy1 + &self.gn_d.backward(ps, g, &cache.gn_d, &dnd);
        (dx, dctx)
    }
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

/// The ε-prediction network plus its context encoder.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub context: ContextEncoder,
    t_lin1: Linear,
    t_lin2: Linear,
    conv_in: Conv1x3x3,
    l0b0: ResBlock,
    l0b1: ResBlock,
    down0: Conv1x3x3,
    l1b0: ResBlock,
    l1b1: ResBlock,
    t1: TransformerBlock,
    down1: Conv1x3x3,
    m0: ResBlock,
    mt: TransformerBlock,
    m1: ResBlock,
    up1conv: Conv1x3x3,
    u1b0: ResBlock,
    u1b1: ResBlock,
    ut1: TransformerBlock,
    up0conv: Conv1x3x3,
    u0b0: ResBlock,
    u0b1: ResBlock,
    gn_out: GroupNorm,
    conv_out: Conv1x3x3,
}

pub struct DenoiserCache {
    temb_sin: Array2<f32>,
    th: Array2<f32>,
    th_act: Array2<f32>,
    temb: Array2<f32>,
    temb_silu: Array2<f32>,
    x_in: Array4<f32>,
    l0b0: ResBlockCache,
    l0b1: ResBlockCache,
    skip0: Array4<f32>,
    l1b0: ResBlockCache,
    l1b1: ResBlockCache,
    t1: TransformerCache,
    skip1: Array4<f32>,
    m0: ResBlockCache,
    mt: TransformerCache,
    m1: ResBlockCache,
    up1_in: Array4<f32>,
    u1b0: ResBlockCache,
    u1b1: ResBlockCache,
    ut1: TransformerCache,
    up0_in: Array4<f32>,
    u0b0: ResBlockCache,
    u0b1: ResBlockCache,
    gn_out: GroupNormCache,
    n_out: Array4<f32>,
    a_out: Array4<f32>,
}

impl Denoiser {
    pub fn new(ps: &mut ParamStore, config: DenoiserConfig) -> Self {
        let [c0, c1, c2] = config.channels;
        let td = config.t_embed_dim;
        let e = config.context_dim;
        let hs = config.heads;
        let context = ContextEncoder::new(ps, "ctx", e);
        Self {
            context,
            t_lin1: Linear::new(ps, "tmlp.l1", td, td),
            t_lin2: Linear::new(ps, "tmlp.l2", td, td),
            conv_in: Conv1x3x3::new(ps, "conv_in", config.latent_channels, c0, 1),
            l0b0: ResBlock::new(ps, "l0b0", c0, c0, td),
            l0b1: ResBlock::new(ps, "l0b1", c0, c0, td),
            down0: Conv1x3x3::new(ps, "down0", c0, c1, 2),
            l1b0: ResBlock::new(ps, "l1b0", c1, c1, td),
            l1b1: ResBlock::new(ps, "l1b1", c1, c1, td),
            t1: TransformerBlock::new(ps, "t1", c1, hs, e),
            down1: Conv1x3x3::new(ps, "down1", c1, c2, 2),
            m0: ResBlock::new(ps, "m0", c2, c2, td),
            mt: TransformerBlock::new(ps, "mt", c2, hs, e),
            m1: ResBlock::new(ps, "m1", c2, c2, td),
            up1conv: Conv1x3x3::new(ps, "up1", c2, c1, 1),
            u1b0: ResBlock::new(ps, "u1b0", 2 * c1, c1, td),
            u1b1: ResBlock::new(ps, "u1b1", c1, c1, td),
            ut1: TransformerBlock::new(ps, "ut1", c1, hs, e),
            up0conv: Conv1x3x3::new(ps, "up0", c1, c0, 1),
            u0b0: ResBlock::new(ps, "u0b0", 2 * c0, c0, td),
            u0b1: ResBlock::new(ps, "u0b1", c0, c0, td),
            gn_out: GroupNorm::new(ps, "gn_out", c0, GN_GROUPS),
            conv_out: Conv1x3x3::new(ps, "conv_out", c0, config.latent_channels, 1),
            config,
        }
    }

    /// Predict the noise component of `x` at step `t`, conditioned on the
    /// encoded attribute tokens `ctx` (`[14, E]` — real or null).
    pub fn forward(
        &self,
        ps: &ParamStore,
        x: &Array4<f32>,
        t: usize,
        ctx: &Array2<f32>,
        pad_mask: &[bool],
    ) -> (Array4<f32>, DenoiserCache) {
        assert_eq!(x.shape()[0], self.config.latent_channels, "latent channels");
        assert_eq!(x.shape()[1], pad_mask.len(), "pad mask vs depth");
        let de = self.config.depth_embeddings;
        // Time embedding MLP.
        let td = self.config.t_embed_dim;
        let temb_sin =
            Array2::from_shape_vec((1, td), sinusoidal_embedding(t as f64, td)).expect("t sin");
        let th = self.t_lin1.forward(ps, &temb_sin);
        let th_act = th.mapv(silu);
        let temb = self.t_lin2.forward(ps, &th_act);
        let temb_silu = temb.mapv(silu);

        let h0 = self.conv_in.forward(ps, x);
        let (h, l0b0c) = self.l0b0.forward(ps, &h0, &temb_silu, pad_mask);
        let (skip0, l0b1c) = self.l0b1.forward(ps, &h, &temb_silu, pad_mask);
        let h = self.down0.forward(ps, &skip0);
        let (h, l1b0c) = self.l1b0.forward(ps, &h, &temb_silu, pad_mask);
        let (h, l1b1c) = self.l1b1.forward(ps, &h, &temb_silu, pad_mask);
        let (skip1, t1c) = self.t1.forward(ps, &h, ctx, pad_mask, de);
        let h = self.down1.forward(ps, &skip1);
        let (h, m0c) = self.m0.forward(ps, &h, &temb_silu, pad_mask);
        let (h, mtc) = self.mt.forward(ps, &h, ctx, pad_mask, de);
        let (mid_out, m1c) = self.m1.forward(ps, &h, &temb_silu, pad_mask);
        let up1_in = upsample2x(&mid_out);
        let h = self.up1conv.forward(ps, &up1_in);
        let h = concat_channels(&h, &skip1);
        let (h, u1b0c) = self.u1b0.forward(ps, &h, &temb_silu, pad_mask);
        let (h, u1b1c) = self.u1b1.forward(ps, &h, &temb_silu, pad_mask);
        let (ut1_out, ut1c) = self.ut1.forward(ps, &h, ctx, pad_mask, de);
        let up0_in = upsample2x(&ut1_out);
        let h = self.up0conv.forward(ps, &up0_in);
        let h = concat_channels(&h, &skip0);
        let (h, u0b0c) = self.u0b0.forward(ps, &h, &temb_silu, pad_mask);
        let (h, u0b1c) = self.u0b1.forward(ps, &h, &temb_silu, pad_mask);
        let (n_out, gn_out_c) = self.gn_out.forward_masked(ps, &h, pad_mask);
        let a_out = n_out.mapv(silu);
        let eps = self.conv_out.forward(ps, &a_out);

        let cache = DenoiserCache {
            temb_sin,
            th,
            th_act,
            temb,
            temb_silu,
            x_in: x.clone(),
            l0b0: l0b0c,
            l0b1: l0b1c,
            skip0,
            l1b0: l1b0c,
            l1b1: l1b1c,
            t1: t1c,
            skip1,
            m0: m0c,
            mt: mtc,
            m1: m1c,
            up1_in,
            u1b0: u1b0c,
            u1b1: u1b1c,
            ut1: ut1c,
            up0_in,
            u0b0: u0b0c,
            u0b1: u0b1c,
            gn_out: gn_out_c,
            n_out,
            a_out,
        };
        (eps, cache)
    }

    /// Backpropagate `d_eps`; returns (dx, d_ctx). Parameter gradients
    /// accumulate into `g`.
    pub fn backward(
        &self,
        ps: &ParamStore,
        g: &mut GradBuf,
        cache: &DenoiserCache,
        d_eps: &Array4<f32>,
    ) -> (Array4<f32>, Array2<f32>) {
        let ts = &cache.temb_silu;
        let mut dts = Array2::<f32>::zeros(ts.raw_dim());
        let mut dctx = Array2::<f32>::zeros((
            crate::context::NUM_ATTRIBUTES,
            self.config.context_dim,
        ));

        let da_out = self.conv_out.backward(ps, g, &cache.a_out, d_eps);
        let dn_out = &da_out * &cache.n_out.mapv(silu_grad);
        let dh = self.gn_out.backward(ps, g, &cache.gn_out, &dn_out);
        let (dh, dt) = self.u0b1.backward(ps, g, &cache.u0b1, ts, &dh);
        dts += &dt;
        let (dh, dt) = self.u0b0.backward(ps, g, &cache.u0b0, ts, &dh);
        dts += &dt;
        // Split the concat: first c0 channels to the up conv, rest to skip0.
        let c0 = self.config.channels[0];
        let d_up0_out = dh.slice(s![..c0, .., .., ..]).to_owned();
        let mut d_skip0 = dh.slice(s![c0.., .., .., ..]).to_owned();
        let d_up0_in = self.up0conv.backward(ps, g, &cache.up0_in, &d_up0_out);
        let d_ut1_out = upsample2x_backward(&d_up0_in);
        let (dh, dc) = self.ut1.backward(ps, g, &cache.ut1, &d_ut1_out);
        dctx += &dc;
        let (dh, dt) = self.u1b1.backward(ps, g, &cache.u1b1, ts, &dh);
        dts += &dt;
        let (dh, dt) = self.u1b0.backward(ps, g, &cache.u1b0, ts, &dh);
        dts += &dt;
        let c1 = self.config.channels[1];
        let d_up1_out = dh.slice(s![..c1, .., .., ..]).to_owned();
        let mut d_skip1 = dh.slice(s![c1.., .., .., ..]).to_owned();
        let d_up1_in = self.up1conv.backward(ps, g, &cache.up1_in, &d_up1_out);
        let d_mid_out = upsample2x_backward(&d_up1_in);
        let (dh, dt) = self.m1.backward(ps, g, &cache.m1, ts, &d_mid_out);
        dts += &dt;
        let (dh, dc) = self.mt.backward(ps, g, &cache.mt, &dh);
        dctx += &dc;
        let (dh, dt) = self.m0.backward(ps, g, &cache.m0, ts, &dh);
        dts += &dt;
        d_skip1 = d_skip1 + self.down1.backward(ps, g, &cache.skip1, &dh);
        let (dh, dc) = self.t1.backward(ps, g, &cache.t1, &d_skip1);
        dctx += &dc;
        let (dh, dt) = self.l1b1.backward(ps, g, &cache.l1b1, ts, &dh);
        dts += &dt;
        let (dh, dt) = self.l1b0.backward(ps, g, &cache.l1b0, ts, &dh);
        dts += &dt;
        d_skip0 = d_skip0 + self.down0.backward(ps, g, &cache.skip0, &dh);
        let (dh, dt) = self.l0b1.backward(ps, g, &cache.l0b1, ts, &d_skip0);
        dts += &dt;
        let (dh, dt) = self.l0b0.backward(ps, g, &cache.l0b0, ts, &dh);
        dts += &dt;
        let dx = self.conv_in.backward(ps, g, &cache.x_in, &dh);

        // Time MLP.
        let d_temb = &dts * &cache.temb.mapv(silu_grad);
        let d_th_act = self.t_lin2.backward(ps, g, &cache.th_act, &d_temb);
        let d_th = &d_th_act * &cache.th.mapv(silu_grad);
        let _ = self.t_lin1.backward(ps, g, &cache.temb_sin, &d_th);

        (dx, dctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ContextVector;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 2,
            channels: [8, 8, 16],
            heads: 2,
            context_dim: 8,
            t_embed_dim: 16,
            depth_embeddings: true,
        }
    }

    fn sample_ctx() -> ContextVector {
        let mut raw = [0.0; crate::context::NUM_ATTRIBUTES];
        raw[0] = 60.0;
        raw[2] = 24.0;
        raw[4] = -10.0;
        raw[5] = 11.0;
        raw[6] = 160.0;
        raw[7] = 70.0;
        raw[8] = ContextVector::ef_from_volumes(160.0, 70.0);
        raw[9] = 150.0;
        raw[10] = 66.0;
        raw[11] = ContextVector::ef_from_volumes(150.0, 66.0);
        raw[12] = 9.2;
        raw[13] = 5.5;
        ContextVector::from_raw(raw)
    }

    fn rand_latent(rng: &mut ChaCha8Rng, c: usize, d: usize, hw: usize) -> Array4<f32> {
        Array4::from_shape_fn((c, d, hw, hw), |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn forward_shapes_match_input() {
        let mut ps = ParamStore::new(40);
        let net = Denoiser::new(&mut ps, tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_latent(&mut rng, 2, 5, 8);
        let pad = vec![true, true, true, true, false];
        let (ctx, _) = net.context.forward(&ps, &sample_ctx());
        let (eps, _) = net.forward(&ps, &x, 17, &ctx, &pad);
        assert_eq!(eps.shape(), x.shape());
    }

    #[test]
    fn deterministic_forward() {
        let mut ps = ParamStore::new(41);
        let net = Denoiser::new(&mut ps, tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_latent(&mut rng, 2, 4, 8);
        let pad = vec![true; 4];
        let (ctx, _) = net.context.forward(&ps, &sample_ctx());
        let (a, _) = net.forward(&ps, &x, 3, &ctx, &pad);
        let (b, _) = net.forward(&ps, &x, 3, &ctx, &pad);
        assert_eq!(a, b);
    }

    #[test]
    fn timestep_changes_output() {
        let mut ps = ParamStore::new(42);
        let net = Denoiser::new(&mut ps, tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_latent(&mut rng, 2, 4, 8);
        let pad = vec![true; 4];
        let (ctx, _) = net.context.forward(&ps, &sample_ctx());
        let (a, _) = net.forward(&ps, &x, 0, &ctx, &pad);
        let (b, _) = net.forward(&ps, &x, 140, &ctx, &pad);
        let diff: f32 = (&a - &b).iter().map(|v| v * v).sum();
        assert!(diff > 1e-8, "timestep had no effect");
    }

    #[test]
    fn context_changes_output() {
        let mut ps = ParamStore::new(43);
        let net = Denoiser::new(&mut ps, tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_latent(&mut rng, 2, 4, 8);
        let pad = vec![true; 4];
        let (ctx, _) = net.context.forward(&ps, &sample_ctx());
        let null = net.context.null_embedding(&ps);
        let (a, _) = net.forward(&ps, &x, 10, &ctx, &pad);
        let (b, _) = net.forward(&ps, &x, 10, &null, &pad);
        let diff: f32 = (&a - &b).iter().map(|v| v * v).sum();
        assert!(diff > 1e-8, "conditioning had no effect");
    }

    /// Without depth codes the network commutes with slice permutations
    /// (all-real stacks); with them it must not.
    #[test]
    fn depth_codes_break_permutation_equivariance() {
        let mut cfg = tiny_config();
        cfg.depth_embeddings = false;
        let mut ps = ParamStore::new(44);
        let net = Denoiser::new(&mut ps, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_latent(&mut rng, 2, 4, 8);
        let pad = vec![true; 4];
        let (ctx, _) = net.context.forward(&ps, &sample_ctx());
        // Permute slices 0..4 → order [2, 0, 3, 1].
        let perm = [2usize, 0, 3, 1];
        let mut xp = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            xp.slice_mut(s![.., dst, .., ..]).assign(&x.slice(s![.., src, .., ..]));
        }
        let (y, _) = net.forward(&ps, &x, 9, &ctx, &pad);
        let (yp, _) = net.forward(&ps, &xp, 9, &ctx, &pad);
        let mut max_dev = 0.0f32;
        for (dst, &src) in perm.iter().enumerate() {
            let a = y.slice(s![.., src, .., ..]);
            let b = yp.slice(s![.., dst, .., ..]);
            for (u, v) in a.iter().zip(b.iter()) {
                max_dev = max_dev.max((u - v).abs());
            }
        }
        assert!(max_dev < 1e-4, "ablated net not equivariant: {max_dev}");

        // Same weights but with depth codes: equivariance must break.
        let mut ps2 = ParamStore::new(44);
        let net2 = Denoiser::new(&mut ps2, tiny_config());
        let (y2, _) = net2.forward(&ps2, &x, 9, &ctx, &pad);
        let (yp2, _) = net2.forward(&ps2, &xp, 9, &ctx, &pad);
        let mut dev = 0.0f32;
        for (dst, &src) in perm.iter().enumerate() {
            let a = y2.slice(s![.., src, .., ..]);
            let b = yp2.slice(s![.., dst, .., ..]);
            for (u, v) in a.iter().zip(b.iter()) {
                dev = dev.max((u - v).abs());
            }
        }
        assert!(dev > 1e-4, "depth codes failed to break equivariance");
    }

    #[test]
    fn padded_slices_do_not_influence_real_ones() {
        // Changing the content of a padded slice must not change the
        // prediction on real slices: convs are 1×3×3 (no depth mixing)
        // and attention masks padded keys.
        let mut ps = ParamStore::new(45);
        let net = Denoiser::new(&mut ps, tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_latent(&mut rng, 2, 5, 8);
        let pad = vec![true, true, true, false, false];
        let (ctx, _) = net.context.forward(&ps, &sample_ctx());
        let (a, _) = net.forward(&ps, &x, 11, &ctx, &pad);
        let mut x2 = x.clone();
        for v in x2.slice_mut(s![.., 3..,  .., ..]).iter_mut() {
            *v += 0.5;
        }
        let (b, _) = net.forward(&ps, &x2, 11, &ctx, &pad);
        let mut dev = 0.0f32;
        for (u, v) in a.slice(s![.., ..3, .., ..]).iter().zip(b.slice(s![.., ..3, .., ..]).iter()) {
            dev = dev.max((u - v).abs());
        }
        assert!(dev < 1e-6, "padded slices leaked into real ones: {dev}");
    }

    #[test]
    fn fd_gradients_full_network() {
        let mut ps = ParamStore::new(46);
        let net = Denoiser::new(&mut ps, tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_latent(&mut rng, 2, 3, 4);
        let pad = vec![true, true, false];
        let c = sample_ctx();
        let (ctx, ctx_cache) = net.context.forward(&ps, &c);
        let loss = |eps: &Array4<f32>| -> f64 { eps.iter().map(|v| (*v as f64).powi(2) / 2.0).sum() };
        let (eps, cache) = net.forward(&ps, &x, 5, &ctx, &pad);
        let base = loss(&eps);
        let mut g = ps.grads();
        let (dx, dctx) = net.backward(&ps, &mut g, &cache, &eps);
        net.context.backward(&ps, &mut g, &ctx_cache, &dctx);
        let h = 2e-3f32;
        // Input gradient.
        for &(ci, di, i, j) in &[(0usize, 0usize, 1usize, 1usize), (1, 2, 3, 0), (0, 1, 0, 2)] {
            let mut x2 = x.clone();
            x2[[ci, di, i, j]] += h;
            let (e2, _) = net.forward(&ps, &x2, 5, &ctx, &pad);
            let fd = (loss(&e2) - base) / h as f64;
            let an = dx[[ci, di, i, j]] as f64;
            assert!(
                (fd - an).abs() < 8e-2 * an.abs().max(0.3),
                "dx[{ci},{di},{i},{j}]: fd {fd} vs {an}"
            );
        }
        // A parameter from several depths of the net, including the
        // context encoder reached through cross-attention.
        let picks: Vec<(&str, crate::nn::ParamId, usize)> = vec![
            ("conv_in.w", net.conv_in.w, 3),
            ("m0.conv1.w", net.m0.conv1.w, 10),
            ("ut1.cross.wk", net.ut1.cross_attn.wk.w, 5),
            ("tmlp.l1", net.t_lin1.w, 20),
            ("ctx.token_w", net.context.token_w, 7),
        ];
        for (name, pid, idx) in picks {
            let mut ps2 = ps.clone();
            ps2.get_mut(pid)[idx] += h;
            let (ctx2, _) = net.context.forward(&ps2, &c);
            let (e2, _) = net.forward(&ps2, &x, 5, &ctx2, &pad);
            let fd = (loss(&e2) - base) / h as f64;
            let an = g.get(pid)[idx] as f64;
            assert!(
                (fd - an).abs() < 8e-2 * an.abs().max(0.3),
                "{name}[{idx}]: fd {fd} vs {an}"
            );
        }
    }
}
