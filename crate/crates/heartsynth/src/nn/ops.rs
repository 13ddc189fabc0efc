//! Layer primitives with explicit forward/backward.
//!
//! Feature maps are `[C, D, H, W]`; token sequences are `[N, C]`. All
//! convolutions are 1×3×3: depth is a batch axis for conv, an attention
//! axis elsewhere. Every backward accumulates into a `GradBuf` with the
//! same flat layout as the store, sequentially, so per-sample gradients
//! and bitwise reruns come for free.

use ndarray::{s, Array1, Array2, Array4, ArrayView2};

use super::param::{xavier_std, GradBuf, ParamId, ParamStore};

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// d silu(x)/dx.
pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Interleaved sinusoidal code: [sin(p·f0), cos(p·f0), sin(p·f1), ...],
/// f_k = 10000^{−2k/dim}.
pub fn sinusoidal_embedding(pos: f64, dim: usize) -> Vec<f32> {
    assert!(dim % 2 == 0, "sinusoidal dim must be even");
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let freq = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        out.push((pos * freq).sin() as f32);
        out.push((pos * freq).cos() as f32);
    }
    out
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Dense layer over token rows; weight stored `[cout, cin]` row-major.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        let w = ps.register_normal(&format!("{name}.w"), cin * cout, xavier_std(cin, cout));
        let b = ps.register_const(&format!("{name}.b"), cout, 0.0);
        Self { w, b, cin, cout }
    }

    fn w_view<'a>(&self, ps: &'a ParamStore) -> ArrayView2<'a, f32> {
        ArrayView2::from_shape((self.cout, self.cin), ps.get(self.w)).expect("w shape")
    }

    /// x: [N, cin] → [N, cout].
    pub fn forward(&self, ps: &ParamStore, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.w_view(ps).t());
        let b = ps.get(self.b);
        for mut row in y.rows_mut() {
            for (v, bb) in row.iter_mut().zip(b.iter()) {
                *v += bb;
            }
        }
        y
    }

    /// Returns dx; accumulates dw/db.
    pub fn backward(
        &self,
        ps: &ParamStore,
        g: &mut GradBuf,
        x: &Array2<f32>,
        dy: &Array2<f32>,
    ) -> Array2<f32> {
        let dw = dy.t().dot(x); // [cout, cin]
        {
            let gw = g.get_mut(self.w);
            for (acc, v) in gw.iter_mut().zip(dw.iter()) {
                *acc += v;
            }
            let gb = g.get_mut(self.b);
            for row in dy.rows() {
                for (acc, v) in gb.iter_mut().zip(row.iter()) {
                    *acc += v;
                }
            }
        }
        dy.dot(&self.w_view(ps))
    }
}

// ---------------------------------------------------------------------------
// Conv 1×3×3
// ---------------------------------------------------------------------------

/// 3×3 convolution applied slice-wise (kernel depth 1), padding 1,
/// configurable in-plane stride. Depth is never touched.
#[derive(Debug, Clone)]
pub struct Conv1x3x3 {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl Conv1x3x3 {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let fan_in = cin * 9;
        let w = ps.register_normal(&format!("{name}.w"), cout * fan_in, xavier_std(fan_in, cout * 9));
        let b = ps.register_const(&format!("{name}.b"), cout, 0.0);
        Self { w, b, cin, cout, stride }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        // Padding 1, kernel 3: out = ceil(in / stride).
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    /// Gathers the 3×3 patch columns of one slice: [cin·9, oh·ow].
    fn im2col(&self, x: &Array4<f32>, d: usize, oh: usize, ow: usize) -> Array2<f32> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let mut col = Array2::zeros((self.cin * 9, oh * ow));
        for c in 0..self.cin {
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let row = (c * 9) + ky * 3 + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            col[[row, oy * ow + ox]] = x[[c, d, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        col
    }

    /// x: [cin, D, H, W] → [cout, D, H', W'].
    pub fn forward(&self, ps: &ParamStore, x: &Array4<f32>) -> Array4<f32> {
        let (d, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        assert_eq!(x.shape()[0], self.cin, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let wmat = ArrayView2::from_shape((self.cout, self.cin * 9), ps.get(self.w)).expect("w");
        let bias = ps.get(self.b);
        let mut y = Array4::zeros((self.cout, d, oh, ow));
        for dd in 0..d {
            let col = self.im2col(x, dd, oh, ow);
            let out = wmat.dot(&col); // [cout, oh·ow]
            for c in 0..self.cout {
                for p in 0..oh * ow {
                    y[[c, dd, p / ow, p % ow]] = out[[c, p]] + bias[c];
                }
            }
        }
        y
    }

    /// Returns dx; accumulates dw/db. Recomputes im2col from the cached
    /// input instead of storing patch matrices.
    pub fn backward(
        &self,
        ps: &ParamStore,
        g: &mut GradBuf,
        x: &Array4<f32>,
        dy: &Array4<f32>,
    ) -> Array4<f32> {
        let (d, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(dy.shape(), &[self.cout, d, oh, ow]);
        let wmat = ArrayView2::from_shape((self.cout, self.cin * 9), ps.get(self.w)).expect("w");
        let mut dx = Array4::zeros((self.cin, d, h, w));
        for dd in 0..d {
            let col = self.im2col(x, dd, oh, ow);
            let mut dy_mat = Array2::zeros((self.cout, oh * ow));
            for c in 0..self.cout {
                for p in 0..oh * ow {
                    dy_mat[[c, p]] = dy[[c, dd, p / ow, p % ow]];
                }
            }
            let dwmat = dy_mat.dot(&col.t()); // [cout, cin·9]
            {
                let gw = g.get_mut(self.w);
                for (acc, v) in gw.iter_mut().zip(dwmat.iter()) {
                    *acc += v;
                }
            }
            let dcol = wmat.t().dot(&dy_mat); // [cin·9, oh·ow]
            // col2im scatter-add.
            for c in 0..self.cin {
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let row = (c * 9) + ky * 3 + kx;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dx[[c, dd, iy as usize, ix as usize]] += dcol[[row, oy * ow + ox]];
                            }
                        }
                    }
                }
            }
        }
        {
            let gb = g.get_mut(self.b);
            for c in 0..self.cout {
                let mut s = 0.0f32;
                for dd in 0..d {
                    for p in 0..oh * ow {
                        s += dy[[c, dd, p / ow, p % ow]];
                    }
                }
                gb[c] += s;
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// GroupNorm
// ---------------------------------------------------------------------------

const GN_EPS: f64 = 1e-5;

/// Per-sample group normalization over (channel-group × D × H × W).
/// Batch-independent by construction, which is what DP-SGD needs.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub c: usize,
    pub groups: usize,
}

#[derive(Debug)]
pub struct GroupNormCache {
    xhat: Array4<f32>,
    inv_std: Vec<f32>,
    depth_mask: Vec<bool>,
    m_real: f64,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, groups: usize) -> Self {
        assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
        let gamma = ps.register_const(&format!("{name}.gamma"), c, 1.0);
        let beta = ps.register_const(&format!("{name}.beta"), c, 0.0);
        Self { gamma, beta, c, groups }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array4<f32>) -> (Array4<f32>, GroupNormCache) {
        let all = vec![true; x.shape()[1]];
        self.forward_masked(ps, x, &all)
    }

    /// Like [`Self::forward`], but moments come only from depth slices
    /// where `depth_mask` is true. Every slice is still normalized (with
    /// the real-slice statistics), so padded content cannot steer real
    /// activations through the normalizer.
    pub fn forward_masked(
        &self,
        ps: &ParamStore,
        x: &Array4<f32>,
        depth_mask: &[bool],
    ) -> (Array4<f32>, GroupNormCache) {
        assert_eq!(x.shape()[0], self.c);
        assert_eq!(x.shape()[1], depth_mask.len(), "depth mask length");
        let real_d = depth_mask.iter().filter(|m| **m).count();
        assert!(real_d > 0, "all slices masked out");
        let cpg = self.c / self.groups;
        let m = (cpg * real_d * x.shape()[2] * x.shape()[3]) as f64;
        let mut xhat = x.clone();
        let mut inv_std = vec![0.0f32; self.groups];
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        for gi in 0..self.groups {
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            for c in gi * cpg..(gi + 1) * cpg {
                for (d, keep) in depth_mask.iter().enumerate() {
                    if !keep {
                        continue;
                    }
                    for v in x.slice(s![c, d, .., ..]).iter() {
                        sum += *v as f64;
                        sumsq += (*v as f64) * (*v as f64);
                    }
                }
            }
            let mean = sum / m;
            let var = (sumsq / m - mean * mean).max(0.0);
            let istd = 1.0 / (var + GN_EPS).sqrt();
            inv_std[gi] = istd as f32;
            for c in gi * cpg..(gi + 1) * cpg {
                for v in xhat.slice_mut(s![c, .., .., ..]).iter_mut() {
                    *v = (((*v as f64) - mean) * istd) as f32;
                }
            }
        }
        let mut y = xhat.clone();
        for c in 0..self.c {
            for v in y.slice_mut(s![c, .., .., ..]).iter_mut() {
                *v = *v * gamma[c] + beta[c];
            }
        }
        (y, GroupNormCache { xhat, inv_std, depth_mask: depth_mask.to_vec(), m_real: m })
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        g: &mut GradBuf,
        cache: &GroupNormCache,
        dy: &Array4<f32>,
    ) -> Array4<f32> {
        let cpg = self.c / self.groups;
        let m = cache.m_real;
        let gamma = ps.get(self.gamma);
        // Parameter grads (over every slice: all outputs carry γ/β).
        {
            let ggamma = g.get_mut(self.gamma);
            for c in 0..self.c {
                let mut s_ = 0.0f64;
                for (dv, xv) in dy.slice(s![c, .., .., ..]).iter().zip(cache.xhat.slice(s![c, .., .., ..]).iter()) {
                    s_ += (*dv as f64) * (*xv as f64);
                }
                ggamma[c] += s_ as f32;
            }
        }
        {
            let gbeta = g.get_mut(self.beta);
            for c in 0..self.c {
                let mut s_ = 0.0f64;
                for dv in dy.slice(s![c, .., .., ..]).iter() {
                    s_ += *dv as f64;
                }
                gbeta[c] += s_ as f32;
            }
        }
        // Input grad. Every output depends on the real-slice moments, so
        // the correction sums span all slices — but only real slices
        // receive the correction term (their values fed the moments).
        let mut dx = Array4::zeros(dy.raw_dim());
        let d_total = dy.shape()[1];
        for gi in 0..self.groups {
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for c in gi * cpg..(gi + 1) * cpg {
                for (dv, xv) in dy.slice(s![c, .., .., ..]).iter().zip(cache.xhat.slice(s![c, .., .., ..]).iter()) {
                    let dxh = (*dv as f64) * gamma[c] as f64;
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * (*xv as f64);
                }
            }
            let istd = cache.inv_std[gi] as f64;
            for c in gi * cpg..(gi + 1) * cpg {
                for d in 0..d_total {
                    let real = cache.depth_mask[d];
                    let dyc = dy.slice(s![c, d, .., ..]);
                    let xhc = cache.xhat.slice(s![c, d, .., ..]);
                    let mut dxc = dx.slice_mut(s![c, d, .., ..]);
                    for ((out, dv), xv) in dxc.iter_mut().zip(dyc.iter()).zip(xhc.iter()) {
                        let dxh = (*dv as f64) * gamma[c] as f64;
                        let corr = if real {
                            (sum_dxhat + (*xv as f64) * sum_dxhat_xhat) / m
                        } else {
                            0.0
                        };
                        *out = (istd * (dxh - corr)) as f32;
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

/// Multi-head attention with separate query and key/value input widths,
/// optional additive q/k position terms (applied before the projections),
/// and an optional key mask. Covers self-, depth-, and cross-attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

#[derive(Debug)]
pub struct AttentionCache {
    xq_in: Array2<f32>,
    xkv_in: Array2<f32>,
    xkv_raw: Array2<f32>,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    attn: Vec<Array2<f32>>, // per head [N, M]
    concat: Array2<f32>,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        heads: usize,
        head_dim: usize,
    ) -> Self {
        let inner = heads * head_dim;
        Self {
            wq: Linear::new(ps, &format!("{name}.wq"), q_dim, inner),
            wk: Linear::new(ps, &format!("{name}.wk"), kv_dim, inner),
            wv: Linear::new(ps, &format!("{name}.wv"), kv_dim, inner),
            wo: Linear::new(ps, &format!("{name}.wo"), inner, q_dim),
            heads,
            head_dim,
        }
    }

    /// xq: [N, q_dim]; xkv: [M, kv_dim]; `q_pos`/`k_pos` are added to the
    /// projection inputs; `key_mask[m] = false` hides key m.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        ps: &ParamStore,
        xq: &Array2<f32>,
        xkv: &Array2<f32>,
        q_pos: Option<&Array2<f32>>,
        k_pos: Option<&Array2<f32>>,
        key_mask: Option<&[bool]>,
    ) -> (Array2<f32>, AttentionCache) {
        let n = xq.shape()[0];
        let m = xkv.shape()[0];
        let xq_in = match q_pos {
            Some(p) => xq + p,
            None => xq.clone(),
        };
        let xkv_in = match k_pos {
            Some(p) => xkv + p,
            None => xkv.clone(),
        };
        let q = self.wq.forward(ps, &xq_in);
        let k = self.wk.forward(ps, &xkv_in);
        // Values come from the raw kv tokens: positions steer where to
        // look, not what is retrieved.
        let v = self.wv.forward(ps, xkv);
        let scale = 1.0 / (self.head_dim as f32).sqrt();
        let mut concat = Array2::zeros((n, self.heads * self.head_dim));
        let mut attn_all = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * self.head_dim..(h + 1) * self.head_dim;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t()); // [N, M]
            scores.mapv_inplace(|v| v * scale);
            if let Some(mask) = key_mask {
                for mi in 0..m {
                    if !mask[mi] {
                        for ni in 0..n {
                            scores[[ni, mi]] = -1.0e30;
                        }
                    }
                }
            }
            // Row-wise stable softmax.
            for mut row in scores.rows_mut() {
                let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            let out = scores.dot(&vh); // [N, hd]
            concat.slice_mut(s![.., cols]).assign(&out);
            attn_all.push(scores);
        }
        let y = self.wo.forward(ps, &concat);
        (y, AttentionCache { xq_in, xkv_in, xkv_raw: xkv.clone(), q, k, v, attn: attn_all, concat })
    }

    /// Returns (dxq, dxkv); positional add distributes gradient to both
    /// token and position inputs identically, so callers add `dxq` to
    /// their position grads if positions are learned.
    pub fn backward(
        &self,
        ps: &ParamStore,
        g: &mut GradBuf,
        cache: &AttentionCache,
        dy: &Array2<f32>,
    ) -> (Array2<f32>, Array2<f32>) {
        let scale = 1.0 / (self.head_dim as f32).sqrt();
        let dconcat = self.wo.backward(ps, g, &cache.concat, dy);
        let n = cache.q.shape()[0];
        let m = cache.k.shape()[0];
        let mut dq = Array2::zeros((n, self.heads * self.head_dim));
        let mut dk = Array2::zeros((m, self.heads * self.head_dim));
        let mut dv = Array2::zeros((m, self.heads * self.head_dim));
        for h in 0..self.heads {
            let cols = h * self.head_dim..(h + 1) * self.head_dim;
            let a = &cache.attn[h]; // [N, M]
            let vh = cache.v.slice(s![.., cols.clone()]);
            let dout = dconcat.slice(s![.., cols.clone()]);
            let dvh = a.t().dot(&dout); // [M, hd]
            dv.slice_mut(s![.., cols.clone()]).assign(&dvh);
            let da = dout.dot(&vh.t()); // [N, M]
            // Softmax backward row-wise.
            let mut ds = Array2::zeros((n, m));
            for i in 0..n {
                let mut dot = 0.0f32;
                for j in 0..m {
                    dot += da[[i, j]] * a[[i, j]];
                }
                for j in 0..m {
                    ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot) * scale;
                }
            }
            let qh = cache.q.slice(s![.., cols.clone()]);
            let kh = cache.k.slice(s![.., cols.clone()]);
            dq.slice_mut(s![.., cols.clone()]).assign(&ds.dot(&kh));
            dk.slice_mut(s![.., cols]).assign(&ds.t().dot(&qh));
        }
        let dxq_in = self.wq.backward(ps, g, &cache.xq_in, &dq);
        let dxkv_in = self.wk.backward(ps, g, &cache.xkv_in, &dk);
        // wv consumed the raw kv tokens (no positional add); its input
        // grad joins the wk path because d(xkv_in)/d(xkv) is identity.
        let dxkv_v = self.wv.backward(ps, g, &cache.xkv_raw, &dv);
        (dxq_in, dxkv_in + &dxkv_v)
    }
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Nearest ×2 in-plane upsample.
pub fn upsample2x(x: &Array4<f32>) -> Array4<f32> {
    let (c, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = Array4::zeros((c, d, h * 2, w * 2));
    for ci in 0..c {
        for di in 0..d {
            for i in 0..h * 2 {
                for j in 0..w * 2 {
                    y[[ci, di, i, j]] = x[[ci, di, i / 2, j / 2]];
                }
            }
        }
    }
    y
}

/// Backward of nearest ×2: sum the 2×2 fan-out.
pub fn upsample2x_backward(dy: &Array4<f32>) -> Array4<f32> {
    let (c, d, h2, w2) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let mut dx = Array4::zeros((c, d, h2 / 2, w2 / 2));
    for ci in 0..c {
        for di in 0..d {
            for i in 0..h2 {
                for j in 0..w2 {
                    dx[[ci, di, i / 2, j / 2]] += dy[[ci, di, i, j]];
                }
            }
        }
    }
    dx
}

/// Channel concat along axis 0.
pub fn concat_channels(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

/// Mean squared error and its input gradient (d/d pred), averaged over
/// all elements.
pub fn mse_and_grad(pred: &Array4<f32>, target: &Array4<f32>) -> (f64, Array4<f32>) {
    let n = pred.len() as f64;
    let mut loss = 0.0f64;
    let mut grad = Array4::zeros(pred.raw_dim());
    for ((gp, p), t) in grad.iter_mut().zip(pred.iter()).zip(target.iter()) {
        let d = (*p - *t) as f64;
        loss += d * d;
        *gp = (2.0 * d / n) as f32;
    }
    (loss / n, grad)
}

/// L1 loss and gradient.
pub fn l1_and_grad(pred: &Array4<f32>, target: &Array4<f32>) -> (f64, Array4<f32>) {
    let n = pred.len() as f64;
    let mut loss = 0.0f64;
    let mut grad = Array4::zeros(pred.raw_dim());
    for ((gp, p), t) in grad.iter_mut().zip(pred.iter()).zip(target.iter()) {
        let d = (*p - *t) as f64;
        loss += d.abs();
        *gp = (d.signum() / n) as f32;
    }
    (loss / n, grad)
}

/// Softmax over a flat slice (stable).
pub fn softmax(x: &[f32]) -> Vec<f32> {
    let mx = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = x.iter().map(|v| (v - mx).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Cross-entropy loss with integer target + logit gradient.
pub fn cross_entropy_and_grad(logits: &[f32], target: usize) -> (f64, Vec<f32>) {
    let p = softmax(logits);
    let loss = -(p[target].max(1e-12) as f64).ln();
    let mut grad = p;
    grad[target] -= 1.0;
    (loss, grad)
}

/// Broadcast-add a per-channel vector over [C, D, H, W].
pub fn add_channel_bias(x: &mut Array4<f32>, bias: &Array1<f32>) {
    for (c, mut plane) in x.outer_iter_mut().enumerate() {
        for v in plane.iter_mut() {
            *v += bias[c];
        }
    }
}

/// [C, D, H, W] → [D·H·W, C] token rows.
pub fn to_tokens(x: &Array4<f32>) -> Array2<f32> {
    let (c, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Array2::zeros((d * h * w, c));
    for ci in 0..c {
        for di in 0..d {
            for i in 0..h {
                for j in 0..w {
                    out[[di * h * w + i * w + j, ci]] = x[[ci, di, i, j]];
                }
            }
        }
    }
    out
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(t: &Array2<f32>, d: usize, h: usize, w: usize) -> Array4<f32> {
    let c = t.shape()[1];
    assert_eq!(t.shape()[0], d * h * w);
    let mut out = Array4::zeros((c, d, h, w));
    for ci in 0..c {
        for di in 0..d {
            for i in 0..h {
                for j in 0..w {
                    out[[ci, di, i, j]] = t[[di * h * w + i * w + j, ci]];
                }
            }
        }
    }
    out
}

/// Pointwise (1×1×1) convolution: a [`Linear`] over channel tokens.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub lin: Linear,
}

impl Conv1x1 {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        Self { lin: Linear::new(ps, name, cin, cout) }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array4<f32>) -> Array4<f32> {
        let (d, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        from_tokens(&self.lin.forward(ps, &to_tokens(x)), d, h, w)
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        g: &mut GradBuf,
        x: &Array4<f32>,
        dy: &Array4<f32>,
    ) -> Array4<f32> {
        let (d, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let dx = self.lin.backward(ps, g, &to_tokens(x), &to_tokens(dy));
        from_tokens(&dx, d, h, w)
    }
}
