//! Rényi accounting for the subsampled Gaussian mechanism.
//!
//! Each noisy step releases a clipped-gradient sum with Gaussian noise on a
//! Poisson-sampled batch. Its Rényi divergence at order α has a closed-ish
//! form: a binomial sum for integer α and a convergent two-part series for
//! fractional α, both evaluated in log space. Divergences add across steps;
//! the final (ε, δ) is the minimum over an order grid of the standard
//! conversion bound
//!
//!   ε(α) = R(α) + ln((α−1)/α) − (ln δ + ln α)/(α−1).
//!
//! The ledger is append-only and deliberately conservative: skipped or
//! empty batches still count as spent steps, so the reported ε can only
//! overstate the true spend.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default privacy slack when a caller does not choose one.
pub const DEFAULT_DELTA: f64 = 1e-5;

/// Largest noise multiplier calibration will consider.
pub const SIGMA_MAX: f64 = 1000.0;

/// Rényi orders used for accounting: 1.25 to 64 in steps of 0.25, plus a
/// coarse tail of large orders. The tail matters for tight budgets: at
/// δ = 1e-5 the conversion term alone exceeds ε = 0.1 for every order
/// below ~65, so without large orders such targets are unreachable no
/// matter how much noise is added. Every order yields a valid bound, so
/// minimizing over a larger set never understates the spend.
pub fn order_grid() -> Vec<f64> {
    let mut orders: Vec<f64> = (5..=256).map(|k| k as f64 * 0.25).collect();
    orders.extend([80.0, 96.0, 128.0, 192.0, 256.0, 384.0, 512.0]);
    orders
}

#[derive(Debug, Error)]
pub enum AccountantError {
    #[error("sample rate {0} outside [0, 1]")]
    BadSampleRate(f64),
    #[error("noise multiplier {0} must be non-negative")]
    BadSigma(f64),
    #[error("delta {0} must lie strictly between 0 and 1")]
    BadDelta(f64),
    #[error(
        "epsilon target {target} is unreachable: even sigma = {sigma_max} spends {best_eps}"
    )]
    Unreachable { target: f64, sigma_max: f64, best_eps: f64 },
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

/// log(e^a − e^b) for a ≥ b; −∞ when the difference underflows.
fn log_sub(a: f64, b: f64) -> f64 {
    if b >= a {
        return f64::NEG_INFINITY;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    a + (-(b - a).exp()).ln_1p()
}

fn log_erfc(x: f64) -> f64 {
    let r = libm::erfc(x);
    if r > 0.0 {
        r.ln()
    } else {
        // erfc underflows near x ≈ 26.5; switch to the asymptotic tail.
        -std::f64::consts::PI.ln() / 2.0 - x.ln() - x * x - 0.5 * x.powi(-2)
            + 0.625 * x.powi(-4)
            - 37.0 / 24.0 * x.powi(-6)
            + 353.0 / 64.0 * x.powi(-8)
    }
}

/// log A(α) for integer α via the binomial expansion.
fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let mut log_a = f64::NEG_INFINITY;
    let mut log_coef = 0.0f64; // ln C(alpha, i), updated incrementally
    for i in 0..=alpha {
        if i > 0 {
            log_coef += ((alpha - i + 1) as f64).ln() - (i as f64).ln();
        }
        let mut s = log_coef + i as f64 * q.ln();
        if alpha - i > 0 {
            s += (alpha - i) as f64 * (1.0 - q).ln();
        }
        s += (i * i - i) as f64 / (2.0 * sigma * sigma);
        log_a = log_add(log_a, s);
    }
    log_a
}

/// log A(α) for fractional α via the two-part series; terms are added with
/// the sign of the generalized binomial coefficient and the loop stops once
/// both tails drop below e⁻³⁰ of unity.
fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let mut log_a0 = f64::NEG_INFINITY;
    let mut log_a1 = f64::NEG_INFINITY;
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let sq2s = std::f64::consts::SQRT_2 * sigma;
    let half_ln = 0.5f64.ln();
    let mut coef = 1.0f64; // generalized binomial C(alpha, i)
    let mut i = 0u64;
    loop {
        if i > 0 {
            coef *= (alpha - i as f64 + 1.0) / i as f64;
        }
        let log_coef = coef.abs().ln();
        let fi = i as f64;
        let j = alpha - fi;
        let log_t0 = log_coef + fi * q.ln() + j * (1.0 - q).ln();
        let log_t1 = log_coef + j * q.ln() + fi * (1.0 - q).ln();
        let log_e0 = half_ln + log_erfc((fi - z0) / sq2s);
        let log_e1 = half_ln + log_erfc((z0 - j) / sq2s);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * sigma * sigma) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1;
        if coef > 0.0 {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        i += 1;
        // Past the order the terms decay, but near sigma_max only
        // polynomially (for the smallest orders the tail needs tens of
        // thousands of terms to dip under the cutoff). The hard cap is a
        // safety valve several times beyond the worst case at sigma = 1000;
        // terms there are < e^-30, so truncation is lost in the noise.
        if (log_s0.max(log_s1) < -30.0 && fi > alpha) || i >= 200_000 {
            break;
        }
    }
    log_add(log_a0, log_a1)
}

/// Rényi divergence of ONE subsampled-Gaussian step at `order`.
pub fn rdp_step(q: f64, sigma: f64, order: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&q) && order > 1.0);
    if q == 0.0 {
        return 0.0;
    }
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    if q == 1.0 {
        // Plain Gaussian mechanism.
        return order / (2.0 * sigma * sigma);
    }
    let log_a = if order.fract().abs() < 1e-12 {
        log_a_int(q, sigma, order.round() as u64)
    } else {
        log_a_frac(q, sigma, order)
    };
    (log_a / (order - 1.0)).max(0.0)
}

/// Converts per-order Rényi totals to (ε, best order) at slack δ.
pub fn rdp_to_eps(orders: &[f64], rdp: &[f64], delta: f64) -> (f64, f64) {
    let mut best = (f64::INFINITY, orders[0]);
    for (&a, &r) in orders.iter().zip(rdp) {
        if !r.is_finite() {
            continue;
        }
        let eps = r + ((a - 1.0) / a).ln() - (delta.ln() + a.ln()) / (a - 1.0);
        if eps < best.0 {
            best = (eps.max(0.0), a);
        }
    }
    best
}

/// ε spent by `steps` homogeneous steps at (q, σ), with slack δ.
pub fn epsilon_spent(q: f64, sigma: f64, steps: usize, delta: f64) -> f64 {
    let orders = order_grid();
    let rdp: Vec<f64> = orders.iter().map(|&a| steps as f64 * rdp_step(q, sigma, a)).collect();
    rdp_to_eps(&orders, &rdp, delta).0
}

/// Smallest σ (to 1e-4 relative) whose ε over the planned steps stays within
/// `target_eps`. Bisection over [1e-3, `SIGMA_MAX`].
pub fn calibrate_noise(
    target_eps: f64,
    delta: f64,
    q: f64,
    steps: usize,
) -> Result<f64, AccountantError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(AccountantError::BadSampleRate(q));
    }
    if !(0.0..1.0).contains(&delta) || delta == 0.0 {
        return Err(AccountantError::BadDelta(delta));
    }
    let mut lo = 1e-3;
    let mut hi = SIGMA_MAX;
    let eps_at = |s: f64| epsilon_spent(q, s, steps, delta);
    let best = eps_at(hi);
    if best > target_eps {
        return Err(AccountantError::Unreachable {
            target: target_eps,
            sigma_max: SIGMA_MAX,
            best_eps: best,
        });
    }
    if eps_at(lo) <= target_eps {
        return Ok(lo);
    }
    while (hi - lo) / hi > 1e-4 {
        let mid = 0.5 * (lo + hi);
        if eps_at(mid) <= target_eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Privacy parameters of one fine-tuning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub target_epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    /// `None` means "calibrate from the target at run start".
    pub noise_multiplier: Option<f64>,
    /// `None` means "derive from batch size / dataset size".
    pub sample_rate: Option<f64>,
    /// `None` means "derive from the epoch plan".
    pub max_steps: Option<usize>,
}

impl PrivacySpec {
    /// DP disabled: the sentinel configuration whose updates must match
    /// plain SGD exactly.
    pub fn disabled() -> Self {
        Self {
            target_epsilon: f64::INFINITY,
            delta: DEFAULT_DELTA,
            clip_norm: f64::INFINITY,
            noise_multiplier: Some(0.0),
            sample_rate: None,
            max_steps: None,
        }
    }

    /// A target budget with everything else left to the run to derive.
    pub fn for_epsilon(target_epsilon: f64) -> Self {
        Self {
            target_epsilon,
            delta: DEFAULT_DELTA,
            clip_norm: 1.0,
            noise_multiplier: None,
            sample_rate: None,
            max_steps: None,
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.target_epsilon.is_infinite()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub step: usize,
    pub q: f64,
    pub sigma: f64,
}

/// Append-only record of noisy steps with cached per-order Rényi totals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub delta: f64,
    pub entries: Vec<LedgerEntry>,
    orders: Vec<f64>,
    rdp: Vec<f64>,
    #[serde(skip)]
    memo: Option<(f64, f64, Vec<f64>)>,
}

impl PrivacyLedger {
    pub fn new(delta: f64) -> Self {
        let orders = order_grid();
        let rdp = vec![0.0; orders.len()];
        Self { delta, entries: Vec::new(), orders, rdp, memo: None }
    }

    /// Records one noisy step.
    pub fn append(&mut self, q: f64, sigma: f64) {
        let fresh = match &self.memo {
            Some((mq, ms, _)) if *mq == q && *ms == sigma => false,
            _ => true,
        };
        if fresh {
            let per: Vec<f64> = self.orders.iter().map(|&a| rdp_step(q, sigma, a)).collect();
            self.memo = Some((q, sigma, per));
        }
        let per = &self.memo.as_ref().expect("just set").2;
        for (r, p) in self.rdp.iter_mut().zip(per) {
            *r += p;
        }
        self.entries.push(LedgerEntry { step: self.entries.len(), q, sigma });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// ε spent so far.
    pub fn epsilon(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        rdp_to_eps(&self.orders, &self.rdp, self.delta).0
    }

    /// ε after one more hypothetical (q, σ) step.
    pub fn epsilon_after(&self, q: f64, sigma: f64) -> f64 {
        let rdp: Vec<f64> = self
            .orders
            .iter()
            .zip(&self.rdp)
            .map(|(&a, &r)| r + rdp_step(q, sigma, a))
            .collect();
        rdp_to_eps(&self.orders, &rdp, self.delta).0
    }

    /// Cumulative Rényi totals (order, value); exposed for monotonicity
    /// checks and reporting.
    pub fn rdp_curve(&self) -> Vec<(f64, f64)> {
        self.orders.iter().cloned().zip(self.rdp.iter().cloned()).collect()
    }
}

/// The privacy outcome embedded in a fine-tuned checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub spec: PrivacySpec,
    pub ledger: PrivacyLedger,
    pub final_epsilon: f64,
}
