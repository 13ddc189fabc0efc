//! Volume compressor: a convolutional autoencoder with two
//! interchangeable bottlenecks.
//!
//! The backbone shrinks each slice by ×4 in-plane over two stride-2
//! stages and never touches the depth axis; a 13-slice stack compresses
//! to a 13-slice latent. The bottleneck is either a diagonal-Gaussian
//! variational head (KL-regularized, weight β) or a vector-quantized
//! codebook with a straight-through estimator. Reconstruction ends in a
//! sigmoid, matching inputs normalized to [0, 1].

use ndarray::{s, Array4};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    l1_and_grad, sigmoid, silu, silu_grad, upsample2x, upsample2x_backward, Conv1x1, Conv1x3x3,
    GradBuf, GroupNorm, GroupNormCache, ParamId, ParamStore,
};

/// In-plane shrink factor from volume to latent.
pub const SPATIAL_FACTOR: usize = 4;

#[derive(Debug, Error)]
pub enum CompressorError {
    #[error("volume of {got_h}x{got_w} in-plane is not divisible by {SPATIAL_FACTOR}")]
    IndivisibleShape { got_h: usize, got_w: usize },
    #[error("latent has {got} channels, expected {expected}")]
    LatentChannels { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressorKind {
    BetaVae,
    VqVae,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressorConfig {
    pub kind: CompressorKind,
    pub channels: [usize; 3],
    pub latent_channels: usize,
    /// KL weight (β-VAE head).
    pub beta: f64,
    /// Codebook entries (VQ head).
    pub codebook_size: usize,
    /// Commitment weight (VQ head).
    pub commitment: f64,
}

impl CompressorConfig {
    pub fn full_scale(kind: CompressorKind) -> Self {
        Self {
            kind,
            channels: [32, 64, 96],
            latent_channels: 4,
            beta: 0.1,
            codebook_size: 4000,
            commitment: 0.25,
        }
    }

    /// Sized for commodity-CPU runs; same factors, fewer features.
    pub fn desk_scale(kind: CompressorKind) -> Self {
        Self { channels: [8, 16, 24], ..Self::full_scale(kind) }
    }
}

fn gn_groups(c: usize) -> usize {
    if c % 8 == 0 {
        8
    } else if c % 4 == 0 {
        4
    } else {
        1
    }
}

// ---------------------------------------------------------------------------
// Residual conv block (no time conditioning)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Block {
    gn1: GroupNorm,
    conv1: Conv1x3x3,
    gn2: GroupNorm,
    conv2: Conv1x3x3,
}

#[derive(Debug)]
struct BlockCache {
    gn1: GroupNormCache,
    n1: Array4<f32>,
    a1: Array4<f32>,
    gn2: GroupNormCache,
    n2: Array4<f32>,
    a2: Array4<f32>,
}

impl Block {
    fn new(ps: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gn1: GroupNorm::new(ps, &format!("{name}.gn1"), c, gn_groups(c)),
            conv1: Conv1x3x3::new(ps, &format!("{name}.conv1"), c, c, 1),
            gn2: GroupNorm::new(ps, &format!("{name}.gn2"), c, gn_groups(c)),
            conv2: Conv1x3x3::new(ps, &format!("{name}.conv2"), c, c, 1),
        }
    }

    fn forward(&self, ps: &ParamStore, x: &Array4<f32>, mask: &[bool]) -> (Array4<f32>, BlockCache) {
        let (n1, gn1c) = self.gn1.forward_masked(ps, x, mask);
        let a1 = n1.mapv(silu);
        let h = self.conv1.forward(ps, &a1);
        let (n2, gn2c) = self.gn2.forward_masked(ps, &h, mask);
        let a2 = n2.mapv(silu);
        let y = self.conv2.forward(ps, &a2) + x;
        (y, BlockCache { gn1: gn1c, n1, a1, gn2: gn2c, n2, a2 })
    }

    fn backward(
        &self,
        ps: &ParamStore,
        g: &mut GradBuf,
        cache: &BlockCache,
        dy: &Array4<f32>,
    ) -> Array4<f32> {
        let da2 = self.conv2.backward(ps, g, &cache.a2, dy);
        let dn2 = &da2 * &cache.n2.mapv(silu_grad);
        let dh = self.gn2.backward(ps, g, &cache.gn2, &dn2);
        let da1 = self.conv1.backward(ps, g, &cache.a1, &dh);
        let dn1 = &da1 * &cache.n1.mapv(silu_grad);
        dy + &self.gn1.backward(ps, g, &cache.gn1, &dn1)
    }
}

// ---------------------------------------------------------------------------
// Compressor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Compressor {
    pub config: CompressorConfig,
    conv_in: Conv1x3x3,
    b0: Block,
    d0: Conv1x3x3,
    b1: Block,
    d1: Conv1x3x3,
    b2: Block,
    gn_e: GroupNorm,
    head: Conv1x1,
    codebook: Option<ParamId>,
    dec_in: Conv1x1,
    b3: Block,
    up0: Conv1x3x3,
    b4: Block,
    up1: Conv1x3x3,
    b5: Block,
    gn_d: GroupNorm,
    conv_out: Conv1x3x3,
}

/// Everything the backward pass needs from one encode+decode.
pub struct CompressorCache {
    x: Array4<f32>,
    c_in: Array4<f32>,
    b0: BlockCache,
    h_b0: Array4<f32>,
    b1: BlockCache,
    h_b1: Array4<f32>,
    b2: BlockCache,
    gn_e: GroupNormCache,
    n_e: Array4<f32>,
    a_e: Array4<f32>,
    /// Bottleneck intermediates.
    pub bottleneck: Bottleneck,
    z_q: Array4<f32>,
    b3: BlockCache,
    up0_in: Array4<f32>,
    b4: BlockCache,
    up1_in: Array4<f32>,
    b5: BlockCache,
    gn_d: GroupNormCache,
    n_d: Array4<f32>,
    a_d: Array4<f32>,
}

/// Per-head state captured during the forward pass.
pub enum Bottleneck {
    Vae {
        mu: Array4<f32>,
        logvar: Array4<f32>,
        eps: Array4<f32>,
    },
    Vq {
        z_e: Array4<f32>,
        indices: Vec<usize>,
    },
}

/// Losses from one training forward.
#[derive(Debug, Clone, Copy)]
pub struct CompressorLosses {
    pub total: f64,
    pub recon_l1: f64,
    /// KL (β-VAE) or codebook+commitment (VQ).
    pub reg: f64,
}

impl Compressor {
    pub fn new(ps: &mut ParamStore, config: CompressorConfig) -> Self {
        let [c0, c1, c2] = config.channels;
        let zc = config.latent_channels;
        let head_out = match config.kind {
            CompressorKind::BetaVae => 2 * zc,
            CompressorKind::VqVae => zc,
        };
        let conv_in = Conv1x3x3::new(ps, "enc.in", 1, c0, 1);
        let b0 = Block::new(ps, "enc.b0", c0);
        let d0 = Conv1x3x3::new(ps, "enc.d0", c0, c1, 2);
        let b1 = Block::new(ps, "enc.b1", c1);
        let d1 = Conv1x3x3::new(ps, "enc.d1", c1, c2, 2);
        let b2 = Block::new(ps, "enc.b2", c2);
        let gn_e = GroupNorm::new(ps, "enc.gn", c2, gn_groups(c2));
        let head = Conv1x1::new(ps, "enc.head", c2, head_out);
        let codebook = match config.kind {
            CompressorKind::VqVae => {
                Some(ps.register_normal("vq.codebook", config.codebook_size * zc, 0.5))
            }
            CompressorKind::BetaVae => None,
        };
        let dec_in = Conv1x1::new(ps, "dec.in", zc, c2);
        let b3 = Block::new(ps, "dec.b3", c2);
        let up0 = Conv1x3x3::new(ps, "dec.up0", c2, c1, 1);
        let b4 = Block::new(ps, "dec.b4", c1);
        let up1 = Conv1x3x3::new(ps, "dec.up1", c1, c0, 1);
        let b5 = Block::new(ps, "dec.b5", c0);
        let gn_d = GroupNorm::new(ps, "dec.gn", c0, gn_groups(c0));
        let conv_out = Conv1x3x3::new(ps, "dec.out", c0, 1, 1);
        Self {
            config,
            conv_in,
            b0,
            d0,
            b1,
            d1,
            b2,
            gn_e,
            head,
            codebook,
            dec_in,
            b3,
            up0,
            b4,
            up1,
            b5,
            gn_d,
            conv_out,
        }
    }

    fn check_shape(&self, x: &Array4<f32>) -> Result<(), CompressorError> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        if h % SPATIAL_FACTOR != 0 || w % SPATIAL_FACTOR != 0 {
            return Err(CompressorError::IndivisibleShape { got_h: h, got_w: w });
        }
        Ok(())
    }

    /// Encoder trunk up to the pre-bottleneck head output.
    #[allow(clippy::type_complexity)]
    fn encode_trunk(
        &self,
        ps: &ParamStore,
        x: &Array4<f32>,
        mask: &[bool],
    ) -> (
        Array4<f32>,
        (Array4<f32>, BlockCache, Array4<f32>, BlockCache, Array4<f32>, BlockCache, GroupNormCache, Array4<f32>, Array4<f32>),
    ) {
        let c_in = self.conv_in.forward(ps, x);
        let (h0, b0c) = self.b0.forward(ps, &c_in, mask);
        let h = self.d0.forward(ps, &h0);
        let (h1, b1c) = self.b1.forward(ps, &h, mask);
        let h = self.d1.forward(ps, &h1);
        let (h2, b2c) = self.b2.forward(ps, &h, mask);
        let (n_e, gnc) = self.gn_e.forward_masked(ps, &h2, mask);
        let a_e = n_e.mapv(silu);
        let pre = self.head.forward(ps, &a_e);
        (pre, (c_in, b0c, h0, b1c, h1, b2c, gnc, n_e, a_e))
    }

    /// Nearest codebook entry per latent position (lowest index wins ties).
    fn quantize(&self, ps: &ParamStore, z_e: &Array4<f32>) -> (Array4<f32>, Vec<usize>) {
        let zc = self.config.latent_channels;
        let book = ps.get(self.codebook.expect("vq head"));
        let k = self.config.codebook_size;
        let (d, h, w) = (z_e.shape()[1], z_e.shape()[2], z_e.shape()[3]);
        let mut z_q = Array4::zeros(z_e.raw_dim());
        let mut indices = Vec::with_capacity(d * h * w);
        for di in 0..d {
            for i in 0..h {
                for j in 0..w {
                    let mut best = 0usize;
                    let mut best_dist = f64::INFINITY;
                    for e in 0..k {
                        let mut dist = 0.0f64;
                        for c in 0..zc {
                            let diff = (z_e[[c, di, i, j]] - book[e * zc + c]) as f64;
                            dist += diff * diff;
                        }
                        if dist < best_dist {
                            best_dist = dist;
                            best = e;
                        }
                    }
                    for c in 0..zc {
                        z_q[[c, di, i, j]] = book[best * zc + c];
                    }
                    indices.push(best);
                }
            }
        }
        (z_q, indices)
    }

    /// Deterministic latent for downstream diffusion training: the
    /// posterior mean (β-VAE) or the quantized code (VQ).
    pub fn encode(
        &self,
        ps: &ParamStore,
        x: &Array4<f32>,
        mask: &[bool],
    ) -> Result<Array4<f32>, CompressorError> {
        self.check_shape(x)?;
        let (pre, _) = self.encode_trunk(ps, x, mask);
        let zc = self.config.latent_channels;
        Ok(match self.config.kind {
            CompressorKind::BetaVae => pre.slice(s![..zc, .., .., ..]).to_owned(),
            CompressorKind::VqVae => self.quantize(ps, &pre).0,
        })
    }

    /// Decode a latent back to a volume in [0, 1].
    pub fn decode(
        &self,
        ps: &ParamStore,
        z: &Array4<f32>,
        mask: &[bool],
    ) -> Result<Array4<f32>, CompressorError> {
        if z.shape()[0] != self.config.latent_channels {
            return Err(CompressorError::LatentChannels {
                got: z.shape()[0],
                expected: self.config.latent_channels,
            });
        }
        let h = self.dec_in.forward(ps, z);
        let (h, _) = self.b3.forward(ps, &h, mask);
        let h = self.up0.forward(ps, &upsample2x(&h));
        let (h, _) = self.b4.forward(ps, &h, mask);
        let h = self.up1.forward(ps, &upsample2x(&h));
        let (h, _) = self.b5.forward(ps, &h, mask);
        let (n, _) = self.gn_d.forward_masked(ps, &h, mask);
        let logits = self.conv_out.forward(ps, &n.mapv(silu));
        Ok(logits.mapv(sigmoid))
    }

    /// Full training forward: encode, sample/quantize, decode. Draws the
    /// reparameterization noise from `rng` (β-VAE only).
    pub fn forward_train(
        &self,
        ps: &ParamStore,
        x: &Array4<f32>,
        mask: &[bool],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array4<f32>, CompressorCache), CompressorError> {
        self.check_shape(x)?;
        let (pre, (c_in, b0, h_b0, b1, h_b1, b2, gn_e, n_e, a_e)) =
            self.encode_trunk(ps, x, mask);
        let zc = self.config.latent_channels;
        let (bottleneck, z_q) = match self.config.kind {
            CompressorKind::BetaVae => {
                let mu = pre.slice(s![..zc, .., .., ..]).to_owned();
                let logvar = pre.slice(s![zc.., .., .., ..]).to_owned();
                let eps = Array4::from_shape_fn(mu.raw_dim(), |_| {
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) as f32
                });
                let z = &mu + &(&eps * &logvar.mapv(|v| (0.5 * v).exp()));
                (Bottleneck::Vae { mu, logvar, eps }, z)
            }
            CompressorKind::VqVae => {
                let (z_q, indices) = self.quantize(ps, &pre);
                (Bottleneck::Vq { z_e: pre, indices }, z_q)
            }
        };
        let h = self.dec_in.forward(ps, &z_q);
        let (h3, b3) = self.b3.forward(ps, &h, mask);
        let up0_in = upsample2x(&h3);
        let h = self.up0.forward(ps, &up0_in);
        let (h4, b4) = self.b4.forward(ps, &h, mask);
        let up1_in = upsample2x(&h4);
        let h = self.up1.forward(ps, &up1_in);
        let (h5, b5) = self.b5.forward(ps, &h, mask);
        let (n_d, gn_d) = self.gn_d.forward_masked(ps, &h5, mask);
        let a_d = n_d.mapv(silu);
        let recon = self.conv_out.forward(ps, &a_d).mapv(sigmoid);
        let cache = CompressorCache {
            x: x.clone(),
            c_in,
            b0,
            h_b0,
            b1,
            h_b1,
            b2,
            gn_e,
            n_e,
            a_e,
            bottleneck,
            z_q,
            b3,
            up0_in,
            b4,
            up1_in,
            b5,
            gn_d,
            n_d,
            a_d,
        };
        Ok((recon, cache))
    }

    /// Masked-L1 + regularizer loss with full backward. Returns the loss
    /// decomposition; gradients land in `g`.
    pub fn loss_and_backward(
        &self,
        ps: &ParamStore,
        g: &mut GradBuf,
        recon: &Array4<f32>,
        cache: &CompressorCache,
        mask: &[bool],
    ) -> CompressorLosses {
        // Masked L1 over real slices.
        let real: Vec<usize> = mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
        let n_real = real.len() * recon.shape()[0] * recon.shape()[2] * recon.shape()[3];
        let (recon_l1, mut d_recon) = {
            // Reuse the dense helper, then zero padded slices and rescale
            // the mean to the real count.
            let (l1_all, mut grad) = l1_and_grad(recon, &cache.x);
            let n_all = recon.len();
            let scale = n_all as f64 / n_real as f64;
            let mut masked_sum = l1_all * n_all as f64;
            for (d, keep) in mask.iter().enumerate() {
                if !keep {
                    for (r, t) in recon
                        .slice(s![.., d, .., ..])
                        .iter()
                        .zip(cache.x.slice(s![.., d, .., ..]).iter())
                    {
                        masked_sum -= ((*r - *t) as f64).abs();
                    }
                    for v in grad.slice_mut(s![.., d, .., ..]).iter_mut() {
                        *v = 0.0;
                    }
                }
            }
            for v in grad.iter_mut() {
                *v *= scale as f32;
            }
            (masked_sum / n_real as f64, grad)
        };
        // Through the sigmoid.
        for (dv, r) in d_recon.iter_mut().zip(recon.iter()) {
            *dv *= r * (1.0 - r);
        }
        // Decoder.
        let da_d = self.conv_out.backward(ps, g, &cache.a_d, &d_recon);
        let dn_d = &da_d * &cache.n_d.mapv(silu_grad);
        let dh5 = self.gn_d.backward(ps, g, &cache.gn_d, &dn_d);
        let dh = self.b5.backward(ps, g, &cache.b5, &dh5);
        let dup1 = self.up1.backward(ps, g, &cache.up1_in, &dh);
        let dh4 = upsample2x_backward(&dup1);
        let dh = self.b4.backward(ps, g, &cache.b4, &dh4);
        let dup0 = self.up0.backward(ps, g, &cache.up0_in, &dh);
        let dh3 = upsample2x_backward(&dup0);
        let dh = self.b3.backward(ps, g, &cache.b3, &dh3);
        let dz_q = self.dec_in.backward(ps, g, &cache.z_q, &dh);

        // Bottleneck: regularizer + gradient routing into the encoder head.
        let zc = self.config.latent_channels;
        let (reg, d_pre) = match &cache.bottleneck {
            Bottleneck::Vae { mu, logvar, eps } => {
                // Latent positions on padded slices carry no objective.
                let lat_real = mu.shape()[0] * real.len() * mu.shape()[2] * mu.shape()[3];
                let mut kl = 0.0f64;
                let mut d_pre = Array4::zeros((
                    2 * zc,
                    mu.shape()[1],
                    mu.shape()[2],
                    mu.shape()[3],
                ));
                let beta = self.config.beta;
                for c in 0..zc {
                    for (d, keep) in mask.iter().enumerate() {
                        for i in 0..mu.shape()[2] {
                            for j in 0..mu.shape()[3] {
                                let dz = dz_q[[c, d, i, j]];
                                let m = mu[[c, d, i, j]] as f64;
                                let lv = logvar[[c, d, i, j]] as f64;
                                let e = eps[[c, d, i, j]] as f64;
                                // Reparameterized reconstruction path.
                                let mut dmu = dz as f64;
                                let mut dlv = dz as f64 * e * 0.5 * (0.5 * lv).exp();
                                if *keep {
                                    kl += -0.5 * (1.0 + lv - m * m - lv.exp());
                                    dmu += beta * m / lat_real as f64;
                                    dlv += beta * (-0.5) * (1.0 - lv.exp()) / lat_real as f64;
                                }
                                d_pre[[c, d, i, j]] = dmu as f32;
                                d_pre[[zc + c, d, i, j]] = dlv as f32;
                            }
                        }
                    }
                }
                (kl / lat_real as f64, d_pre)
            }
            Bottleneck::Vq { z_e, indices } => {
                let (dd, hh, ww) = (z_e.shape()[1], z_e.shape()[2], z_e.shape()[3]);
                let lat_real = zc * real.len() * hh * ww;
                let book = ps.get(self.codebook.expect("vq head")).to_vec();
                let commit = self.config.commitment;
                let mut codebook_loss = 0.0f64;
                let mut commit_loss = 0.0f64;
                let mut d_pre = Array4::zeros(z_e.raw_dim());
                {
                    let gbook = g.get_mut(self.codebook.expect("vq head"));
                    for d in 0..dd {
                        for i in 0..hh {
                            for j in 0..ww {
                                let e = indices[d * hh * ww + i * ww + j];
                                let keep = mask[d];
                                for c in 0..zc {
                                    // Straight-through: the decoder grad
                                    // passes to the encoder unchanged.
                                    let mut dze = dz_q[[c, d, i, j]] as f64;
                                    let diff = (z_e[[c, d, i, j]] - book[e * zc + c]) as f64;
                                    if keep {
                                        codebook_loss += diff * diff;
                                        commit_loss += diff * diff;
                                        gbook[e * zc + c] +=
                                            (-2.0 * diff / lat_real as f64) as f32;
                                        dze += commit * 2.0 * diff / lat_real as f64;
                                    }
                                    d_pre[[c, d, i, j]] = dze as f32;
                                }
                            }
                        }
                    }
                }
                (
                    (codebook_loss + commit * commit_loss) / lat_real as f64,
                    d_pre,
                )
            }
        };

        // Encoder trunk.
        let da_e = self.head.backward(ps, g, &cache.a_e, &d_pre);
        let dn_e = &da_e * &cache.n_e.mapv(silu_grad);
        let dh2 = self.gn_e.backward(ps, g, &cache.gn_e, &dn_e);
        let dh = self.b2.backward(ps, g, &cache.b2, &dh2);
        let dh1 = self.d1.backward(ps, g, &cache.h_b1, &dh);
        let dh = self.b1.backward(ps, g, &cache.b1, &dh1);
        let dh0 = self.d0.backward(ps, g, &cache.h_b0, &dh);
        let dh = self.b0.backward(ps, g, &cache.b0, &dh0);
        let _ = self.conv_in.backward(ps, g, &cache.c_in, &dh);

        let total = recon_l1
            + match self.config.kind {
                CompressorKind::BetaVae => self.config.beta * reg,
                CompressorKind::VqVae => reg,
            };
        CompressorLosses { total, recon_l1, reg }
    }

    /// VQ only: per-position code indices from the last forward, for
    /// usage accounting.
    pub fn vq_indices<'a>(&self, cache: &'a CompressorCache) -> Option<&'a [usize]> {
        match &cache.bottleneck {
            Bottleneck::Vq { indices, .. } => Some(indices),
            Bottleneck::Vae { .. } => None,
        }
    }

    /// VQ only: overwrite one codebook row (dead-code refresh).
    pub fn reset_code(&self, ps: &mut ParamStore, code: usize, value: &[f32]) {
        let zc = self.config.latent_channels;
        assert_eq!(value.len(), zc);
        let book = ps.get_mut(self.codebook.expect("vq head"));
        book[code * zc..(code + 1) * zc].copy_from_slice(value);
    }

    /// VQ only: read one codebook row.
    pub fn code_row(&self, ps: &ParamStore, code: usize) -> Vec<f32> {
        let zc = self.config.latent_channels;
        ps.get(self.codebook.expect("vq head"))[code * zc..(code + 1) * zc].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg(kind: CompressorKind) -> CompressorConfig {
        CompressorConfig {
            kind,
            channels: [4, 8, 8],
            latent_channels: 2,
            beta: 0.1,
            codebook_size: 12,
            commitment: 0.25,
        }
    }

    fn tiny_volume(seed: u64, d: usize, hw: usize) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((1, d, hw, hw), |_| rng.random_range(0.0f32..1.0))
    }

    #[test]
    fn latent_keeps_depth_and_shrinks_inplane() {
        for kind in [CompressorKind::BetaVae, CompressorKind::VqVae] {
            let mut ps = ParamStore::new(30);
            let comp = Compressor::new(&mut ps, tiny_cfg(kind));
            let x = tiny_volume(1, 5, 8);
            let mask = vec![true, true, true, true, false];
            let z = comp.encode(&ps, &x, &mask).unwrap();
            assert_eq!(z.shape(), &[2, 5, 2, 2], "kind {kind:?}");
            let recon = comp.decode(&ps, &z, &mask).unwrap();
            assert_eq!(recon.shape(), x.shape());
            for v in recon.iter() {
                assert!(*v > 0.0 && *v < 1.0, "sigmoid range");
            }
        }
    }

    #[test]
    fn indivisible_inplane_rejected() {
        let mut ps = ParamStore::new(31);
        let comp = Compressor::new(&mut ps, tiny_cfg(CompressorKind::BetaVae));
        let x = tiny_volume(2, 3, 6);
        let err = comp.encode(&ps, &x, &[true, true, true]).unwrap_err();
        assert!(matches!(err, CompressorError::IndivisibleShape { .. }));
    }

    #[test]
    fn wrong_latent_channels_rejected() {
        let mut ps = ParamStore::new(32);
        let comp = Compressor::new(&mut ps, tiny_cfg(CompressorKind::BetaVae));
        let z = Array4::zeros((3, 2, 2, 2));
        let err = comp.decode(&ps, &z, &[true, true]).unwrap_err();
        assert!(matches!(err, CompressorError::LatentChannels { got: 3, expected: 2 }));
    }

    #[test]
    fn vae_fd_gradients() {
        let mut ps = ParamStore::new(33);
        let comp = Compressor::new(&mut ps, tiny_cfg(CompressorKind::BetaVae));
        let x = tiny_volume(3, 2, 4);
        let mask = vec![true, true];
        let run = |ps: &ParamStore| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let (recon, cache) = comp.forward_train(ps, &x, &mask, &mut rng).unwrap();
            let mut sink = ps.grads();
            comp.loss_and_backward(ps, &mut sink, &recon, &cache, &mask).total
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (recon, cache) = comp.forward_train(&ps, &x, &mask, &mut rng).unwrap();
        let mut g = ps.grads();
        let losses = comp.loss_and_backward(&ps, &mut g, &recon, &cache, &mask);
        let base = losses.total;
        let h = 1e-3f32;
        for (pid, name, idx) in [
            (comp.conv_in.w, "enc.in", 2usize),
            (comp.head.lin.w, "enc.head", 5),
            (comp.dec_in.lin.w, "dec.in", 3),
            (comp.conv_out.w, "dec.out", 7),
        ] {
            let mut ps2 = ps.clone();
            ps2.get_mut(pid)[idx] += h;
            let fd = (run(&ps2) - base) / h as f64;
            let an = g.get(pid)[idx] as f64;
            assert!(
                (fd - an).abs() < 8e-2 * an.abs().max(0.02),
                "{name}[{idx}]: fd {fd} vs {an}"
            );
        }
    }

    #[test]
    fn vq_gradients_codebook_formula_and_straight_through() {
        let mut ps = ParamStore::new(34);
        let comp = Compressor::new(&mut ps, tiny_cfg(CompressorKind::VqVae));
        let x = tiny_volume(4, 2, 4);
        let mask = vec![true, true];
        let run = |ps: &ParamStore| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(78);
            let (recon, cache) = comp.forward_train(ps, &x, &mask, &mut rng).unwrap();
            let mut sink = ps.grads();
            comp.loss_and_backward(ps, &mut sink, &recon, &cache, &mask).total
        };
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let (recon, cache) = comp.forward_train(&ps, &x, &mask, &mut rng).unwrap();
        let mut g = ps.grads();
        let base = comp.loss_and_backward(&ps, &mut g, &recon, &cache, &mask).total;

        // Codebook rows are pulled toward their assigned encoder vectors by
        // the exact closed-form term; the reconstruction path must not leak
        // into them. (Finite differences would see the reconstruction path,
        // which is exactly what the update rule discards, so the gradient is
        // checked against the formula instead.)
        let Bottleneck::Vq { z_e, indices } = &cache.bottleneck else {
            panic!("vq cache expected")
        };
        let (zc, hh, ww) = (z_e.shape()[0], z_e.shape()[2], z_e.shape()[3]);
        let lat_real = zc * 2 * hh * ww;
        let pid = comp.codebook.unwrap();
        let book = ps.get(pid).to_vec();
        let mut expect = vec![0.0f64; book.len()];
        for d in 0..2 {
            for i in 0..hh {
                for j in 0..ww {
                    let e = indices[d * hh * ww + i * ww + j];
                    for c in 0..zc {
                        let diff = (z_e[[c, d, i, j]] - book[e * zc + c]) as f64;
                        expect[e * zc + c] += -2.0 * diff / lat_real as f64;
                    }
                }
            }
        }
        for (k, &want) in expect.iter().enumerate() {
            let got = g.get(pid)[k] as f64;
            assert!((got - want).abs() < 1e-6, "book[{k}]: {got} vs {want}");
        }

        // Decoder weights stay exactly differentiable — the assignment
        // cannot move when only the decoder changes — so FD applies there.
        let h = 1e-3f32;
        for (pid, name, idx) in [
            (comp.dec_in.lin.w, "dec.in", 3usize),
            (comp.conv_out.w, "dec.out", 7),
        ] {
            let mut ps2 = ps.clone();
            ps2.get_mut(pid)[idx] += h;
            let fd = (run(&ps2) - base) / h as f64;
            let an = g.get(pid)[idx] as f64;
            assert!(
                (fd - an).abs() < 8e-2 * an.abs().max(0.02),
                "{name}[{idx}]: fd {fd} vs {an}"
            );
        }

        // Straight-through: with zero commitment the encoder has no exact
        // gradient at all (the quantized tensor is piecewise constant in
        // it), yet the estimator must still carry the decoder's pull back.
        let cfg = CompressorConfig { commitment: 0.0, ..tiny_cfg(CompressorKind::VqVae) };
        let mut ps0 = ParamStore::new(34);
        let comp0 = Compressor::new(&mut ps0, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let (recon, cache) = comp0.forward_train(&ps0, &x, &mask, &mut rng).unwrap();
        let mut g0 = ps0.grads();
        comp0.loss_and_backward(&ps0, &mut g0, &recon, &cache, &mask);
        let enc_sq: f64 = g0.get(comp0.conv_in.w).iter().map(|v| (*v as f64).powi(2)).sum();
        assert!(enc_sq > 0.0, "straight-through must reach the encoder");
    }

    #[test]
    fn quantize_is_deterministic_and_uses_codebook_rows() {
        let mut ps = ParamStore::new(35);
        let comp = Compressor::new(&mut ps, tiny_cfg(CompressorKind::VqVae));
        let x = tiny_volume(5, 3, 4);
        let mask = vec![true; 3];
        let z1 = comp.encode(&ps, &x, &mask).unwrap();
        let z2 = comp.encode(&ps, &x, &mask).unwrap();
        assert_eq!(z1, z2);
        // Every latent vector equals some codebook row exactly.
        let book = ps.get(comp.codebook.unwrap()).to_vec();
        for d in 0..3 {
            for i in 0..1 {
                for j in 0..1 {
                    let v = [z1[[0, d, i, j]], z1[[1, d, i, j]]];
                    let found = (0..12).any(|e| book[e * 2] == v[0] && book[e * 2 + 1] == v[1]);
                    assert!(found, "latent not on the codebook");
                }
            }
        }
    }

    #[test]
    fn reset_code_moves_the_row() {
        let mut ps = ParamStore::new(36);
        let comp = Compressor::new(&mut ps, tiny_cfg(CompressorKind::VqVae));
        comp.reset_code(&mut ps, 7, &[0.25, -0.5]);
        assert_eq!(comp.code_row(&ps, 7), vec![0.25, -0.5]);
    }

    #[test]
    fn padded_slices_cannot_move_real_reconstruction() {
        let mut ps = ParamStore::new(37);
        let comp = Compressor::new(&mut ps, tiny_cfg(CompressorKind::BetaVae));
        let x = tiny_volume(6, 4, 8);
        let mask = vec![true, true, true, false];
        let mut x2 = x.clone();
        for v in x2.slice_mut(s![.., 3, .., ..]).iter_mut() {
            *v = 1.0 - *v;
        }
        let z1 = comp.encode(&ps, &x, &mask).unwrap();
        let z2 = comp.encode(&ps, &x2, &mask).unwrap();
        for d in 0..3 {
            for (a, b) in z1.slice(s![.., d, .., ..]).iter().zip(z2.slice(s![.., d, .., ..]).iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
