//! Shared helpers for integration tests.
//!
//! The privacy oracle here recomputes the subsampled-Gaussian Rényi
//! divergence by brute-force numerical integration, sharing no code with
//! the accountant's series evaluation. Agreement between the two is what
//! makes the accountant trustworthy.

#![allow(dead_code)]

use heartsynth::dp::accountant::order_grid;

/// log N(z; mean, sigma^2).
fn log_gauss(z: f64, mean: f64, sigma: f64) -> f64 {
    let d = (z - mean) / sigma;
    -0.5 * d * d - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Rényi divergence of one subsampled-Gaussian step by Simpson quadrature
/// of  A = ∫ mix(z)^α base(z)^(1−α) dz  with base = N(0, σ²) and
/// mix = (1−q)·N(0, σ²) + q·N(1, σ²), all in log space.
///
/// The integrand has a bump near 0 and one near z = α (width ~σ each);
/// the range covers both with 12σ margins and ~200 nodes per σ.
pub fn oracle_rdp(q: f64, sigma: f64, alpha: f64) -> f64 {
    assert!(q > 0.0 && q < 1.0 && sigma > 0.0 && alpha > 1.0);
    let lo = -12.0 * sigma;
    let hi = alpha + 12.0 * sigma;
    let n = (((hi - lo) / (sigma / 200.0)).ceil() as usize + 1) / 2 * 2; // even
    let h = (hi - lo) / n as f64;
    let lq = q.ln();
    let l1q = (1.0 - q).ln();
    let mut log_sum = f64::NEG_INFINITY;
    for k in 0..=n {
        let z = lo + k as f64 * h;
        let log_mix = log_add(l1q + log_gauss(z, 0.0, sigma), lq + log_gauss(z, 1.0, sigma));
        let g = alpha * log_mix + (1.0 - alpha) * log_gauss(z, 0.0, sigma);
        let w: f64 = if k == 0 || k == n {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        log_sum = log_add(log_sum, w.ln() + g);
    }
    let log_a = log_sum + (h / 3.0).ln();
    (log_a / (alpha - 1.0)).max(0.0)
}

/// (ε, δ) spent by `steps` identical steps, by quadrature at every order.
pub fn oracle_epsilon(q: f64, sigma: f64, steps: usize, delta: f64) -> f64 {
    let mut best = f64::INFINITY;
    for a in order_grid() {
        let r = steps as f64 * oracle_rdp(q, sigma, a);
        let eps = r + ((a - 1.0) / a).ln() - (delta.ln() + a.ln()) / (a - 1.0);
        if eps < best {
            best = eps.max(0.0);
        }
    }
    best
}

/// Bisection on the quadrature ε for the smallest adequate σ.
pub fn oracle_calibrate(target: f64, delta: f64, q: f64, steps: usize) -> f64 {
    let mut lo = 1e-3;
    let mut hi = 1000.0;
    assert!(oracle_epsilon(q, hi, steps, delta) <= target, "target unreachable");
    if oracle_epsilon(q, lo, steps, delta) <= target {
        return lo;
    }
    while (hi - lo) / hi > 1e-4 {
        let mid = 0.5 * (lo + hi);
        if oracle_epsilon(q, mid, steps, delta) <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}
