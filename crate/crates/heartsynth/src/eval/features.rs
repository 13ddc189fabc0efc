//! Feature extraction and the Fréchet distance between feature sets.
//!
//! Realism is scored by fitting a Gaussian to embedding vectors of real and
//! synthetic volumes and taking the Fréchet distance between the two fits.
//! The embedding backbone is deliberately pluggable: scores are only
//! comparable when both sides used the same extractor, so each `FeatureSet`
//! records the extractor fingerprint and [`frechet_distance`] refuses mixed
//! pairs. The built-in extractor is an *untrained* convolutional embedder
//! with weights drawn from a fixed seed — deterministic across machines,
//! which is what a regression suite needs, and random projections preserve
//! enough geometry to rank distribution shifts.

use ndarray::{Array2, Array3, Array4};
use nalgebra::{DMatrix, DVector};

use crate::io::checkpoint::sha256_hex;
use crate::nn::{silu, Conv1x3x3, ParamStore};
use crate::volume::VolumeGrid;

use super::EvalError;

/// Default number of central slices metrics look at, chosen so padded
/// depth never contaminates a score.
pub const CENTRAL_SLICES: usize = 7;

/// Registry name of the fixed-seed untrained convolutional embedder.
pub const EXTRACTOR_CONV32: &str = "conv32-rand-v1";

/// Feature dimension of [`EXTRACTOR_CONV32`].
pub const CONV32_DIM: usize = 32;

const CONV32_SEED: u64 = 0xFEA7_0001;

/// The `k` slices centered on `⌊D/2⌋`, as a copied stack.
///
/// When `D − k` is odd the window sits one slice lower. Applying the crop
/// twice is the same as applying it once, so downstream code can call it
/// defensively.
pub fn central_slices(v: &VolumeGrid, k: usize) -> Result<Array3<f32>, EvalError> {
    let d = v.depth();
    if d < k {
        return Err(EvalError::TooShallow { depth: d, needed: k });
    }
    let start = d / 2 - k / 2;
    Ok(v.data.slice(ndarray::s![start..start + k, .., ..]).to_owned())
}

/// N embedding vectors of dimension F plus the fingerprint of the model
/// that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// `[N, F]`, one row per volume.
    pub features: Array2<f64>,
    /// `<registry name>:<sha256 of the extractor weights>`.
    pub extractor: String,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// True when N < F + 1, i.e. the sample covariance cannot be full
    /// rank and [`frechet_distance`] will blend it toward a scaled
    /// identity before use.
    pub fn needs_shrinkage(&self) -> bool {
        self.len() < self.dim() + 1
    }
}

/// Untrained slice embedder: three stride-2 convolutions with SiLU, then a
/// global average pool per slice. Weights come from a fixed seed and are
/// never updated, so the same registry name always means the same map.
pub struct SliceEmbedder {
    ps: ParamStore,
    c1: Conv1x3x3,
    c2: Conv1x3x3,
    c3: Conv1x3x3,
    fingerprint: String,
}

impl SliceEmbedder {
    /// Builds the embedder registered under `name`.
    pub fn new(name: &str) -> Result<Self, EvalError> {
        let seed = match name {
            EXTRACTOR_CONV32 => CONV32_SEED,
            other => return Err(EvalError::UnknownExtractor(other.to_string())),
        };
        let mut ps = ParamStore::new(seed);
        let c1 = Conv1x3x3::new(&mut ps, "emb.c1", 1, 8, 2);
        let c2 = Conv1x3x3::new(&mut ps, "emb.c2", 8, 16, 2);
        let c3 = Conv1x3x3::new(&mut ps, "emb.c3", 16, CONV32_DIM, 2);
        let mut bytes = Vec::with_capacity(ps.len() * 4);
        for w in ps.flat() {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        let fingerprint = format!("{name}:{}", sha256_hex(&bytes));
        Ok(Self { ps, c1, c2, c3, fingerprint })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn feature_dim(&self) -> usize {
        CONV32_DIM
    }

    /// One embedding vector for a volume: central slices are mapped
    /// independently (the convolutions never mix depth) and the per-slice
    /// vectors are mean-pooled.
    pub fn embed(&self, v: &VolumeGrid, k: usize) -> Result<Vec<f64>, EvalError> {
        let stack = central_slices(v, k)?;
        let (d, h, w) = (stack.shape()[0], stack.shape()[1], stack.shape()[2]);
        let x = stack.into_shape_with_order([1, d, h, w]).expect("rank-4 view");
        let h1 = self.c1.forward(&self.ps, &x).mapv(silu);
        let h2 = self.c2.forward(&self.ps, &h1).mapv(silu);
        let h3: Array4<f32> = self.c3.forward(&self.ps, &h2).mapv(silu);
        let (oc, oh, ow) = (h3.shape()[0], h3.shape()[2], h3.shape()[3]);
        let area = (oh * ow) as f64;
        let mut out = vec![0.0f64; oc];
        for c in 0..oc {
            let mut pooled = 0.0f64;
            for dd in 0..d {
                let mut s = 0.0f64;
                for v in h3.slice(ndarray::s![c, dd, .., ..]).iter() {
                    s += *v as f64;
                }
                pooled += s / area;
            }
            out[c] = pooled / d as f64;
        }
        Ok(out)
    }
}

/// Embeds every volume with the named extractor. Deterministic: the same
/// volumes in the same order always produce the identical matrix.
pub fn extract_features(
    volumes: &[VolumeGrid],
    extractor: &str,
    k: usize,
) -> Result<FeatureSet, EvalError> {
    let emb = SliceEmbedder::new(extractor)?;
    let f = emb.feature_dim();
    let mut features = Array2::zeros((volumes.len(), f));
    for (i, v) in volumes.iter().enumerate() {
        let row = emb.embed(v, k)?;
        for (j, val) in row.into_iter().enumerate() {
            features[[i, j]] = val;
        }
    }
    Ok(FeatureSet { features, extractor: emb.fingerprint().to_string() })
}

/// Eigenvalues may dip this far below zero before the matrix is treated
/// as numerically indefinite rather than merely rounded.
const EIG_TOL: f64 = 1e-8;

/// Shrinkage weight applied when a side has too few rows for a full-rank
/// covariance: `Σ ← (1−λ)Σ + λ·(tr Σ / F)·I`.
const SHRINK_LAMBDA: f64 = 0.1;

fn mean_cov(fs: &FeatureSet) -> Result<(DVector<f64>, DMatrix<f64>), EvalError> {
    let (n, f) = (fs.len(), fs.dim());
    if n < 2 {
        return Err(EvalError::TooFewVolumes { have: n, need: 2 });
    }
    let mut mean = DVector::zeros(f);
    for i in 0..n {
        for j in 0..f {
            mean[j] += fs.features[[i, j]];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(f, f);
    for i in 0..n {
        for a in 0..f {
            let da = fs.features[[i, a]] - mean[a];
            for b in 0..f {
                cov[(a, b)] += da * (fs.features[[i, b]] - mean[b]);
            }
        }
    }
    cov /= (n - 1) as f64;
    if fs.needs_shrinkage() {
        let tr = cov.trace();
        let target = tr / f as f64;
        cov *= 1.0 - SHRINK_LAMBDA;
        for j in 0..f {
            cov[(j, j)] += SHRINK_LAMBDA * target;
        }
    }
    Ok((mean, cov))
}

/// Clamped eigenvalues of a symmetric matrix, erroring when one falls
/// below `−EIG_TOL` (the matrix should have been positive semidefinite).
fn psd_eigenvalues(m: DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>), EvalError> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if *v < -EIG_TOL {
            return Err(EvalError::DegenerateCovariance { min_eig: *v });
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok((vals, eig.eigenvectors))
}

fn sqrtm_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>, EvalError> {
    let (vals, vecs) = psd_eigenvalues(m)?;
    let sqrt_diag = DMatrix::from_diagonal(&vals.map(f64::sqrt));
    Ok(&vecs * sqrt_diag * vecs.transpose())
}

/// Squared Fréchet distance between Gaussian fits of two feature sets:
/// `‖μ_A − μ_B‖² + Tr(Σ_A + Σ_B − 2(Σ_A Σ_B)^{1/2})`.
///
/// The cross term is computed as `Tr((S Σ S)^{1/2})` with `S` the square
/// root of whichever covariance compares lexicographically smaller, so the
/// same floating-point operations run regardless of argument order and
/// `frechet_distance(a, b) == frechet_distance(b, a)` holds bitwise.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64, EvalError> {
    if a.extractor != b.extractor {
        return Err(EvalError::ExtractorMismatch {
            left: a.extractor.clone(),
            right: b.extractor.clone(),
        });
    }
    if a.dim() != b.dim() {
        return Err(EvalError::LengthMismatch { left: a.dim(), right: b.dim() });
    }
    let (mu_a, cov_a) = mean_cov(a)?;
    let (mu_b, cov_b) = mean_cov(b)?;

    let mut mean_term = 0.0f64;
    for j in 0..a.dim() {
        let d = mu_a[j] - mu_b[j];
        mean_term += d * d;
    }
    let trace_term = cov_a.trace() + cov_b.trace();

    let swap = matches!(
        cov_a.iter().zip(cov_b.iter()).find_map(|(x, y)| match x.total_cmp(y) {
            std::cmp::Ordering::Equal => None,
            other => Some(other),
        }),
        Some(std::cmp::Ordering::Greater)
    );
    let (first, second) = if swap { (cov_b, cov_a) } else { (cov_a, cov_b) };
    let s = sqrtm_psd(first)?;
    let inner = &s * second * &s;
    let (vals, _) = psd_eigenvalues(inner)?;
    let cross: f64 = vals.iter().map(|v| v.sqrt()).sum();

    Ok(mean_term + trace_term - 2.0 * cross)
}
