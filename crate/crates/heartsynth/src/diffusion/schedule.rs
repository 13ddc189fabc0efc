//! Linear variance schedule and the forward (noising) process.
//!
//! All schedule math is f64; endpoints are assigned, not recomputed, so
//! `β[0]` and `β[T−1]` are bit-exact against the configured bounds.

use ndarray::Array4;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("need 0 < β_min < β_max < 1 and T ≥ 2, got β_min={beta_min}, β_max={beta_max}, T={t}")]
    InvalidRange { beta_min: f64, beta_max: f64, t: usize },
    #[error("timestep {t} out of range for T={steps}")]
    IndexOutOfRange { t: usize, steps: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }
}

/// Defaults matching the trained configuration.
pub const DEFAULT_STEPS: usize = 150;
pub const DEFAULT_BETA_MIN: f64 = 1.0e-4;
pub const DEFAULT_BETA_MAX: f64 = 7.0e-2;

pub fn default_schedule() -> NoiseSchedule {
    build_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).expect("default range valid")
}

pub fn build_schedule(t: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule, ScheduleError> {
    if !(t >= 2 && beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
        return Err(ScheduleError::InvalidRange { beta_min, beta_max, t });
    }
    let mut beta = Vec::with_capacity(t);
    let span = beta_max - beta_min;
    for i in 0..t {
        beta.push(beta_min + i as f64 * span / (t - 1) as f64);
    }
    // Endpoints exact by assignment.
    beta[0] = beta_min;
    beta[t - 1] = beta_max;
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t);
    let mut prod = 1.0f64;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

/// x_t = √ᾱ[t]·x0 + √(1−ᾱ[t])·ε.
pub fn forward_diffuse(
    x0: &Array4<f32>,
    t: usize,
    eps: &Array4<f32>,
    sched: &NoiseSchedule,
) -> Result<Array4<f32>, ScheduleError> {
    if t >= sched.steps() {
        return Err(ScheduleError::IndexOutOfRange { t, steps: sched.steps() });
    }
    let ab = sched.alpha_bar[t];
    let (s_sig, s_noise) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let mut out = x0.clone();
    for (o, e) in out.iter_mut().zip(eps.iter()) {
        *o = s_sig * *o + s_noise * *e;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn endpoints_bit_exact_and_interior_linear() {
        let s = default_schedule();
        assert_eq!(s.beta[0].to_bits(), 1.0e-4f64.to_bits());
        assert_eq!(s.beta[149].to_bits(), 7.0e-2f64.to_bits());
        assert!((s.beta[75] - 0.035285).abs() < 1e-6);
    }

    #[test]
    fn alpha_bar_strictly_decreasing_in_unit_interval() {
        let s = default_schedule();
        for t in 0..s.steps() {
            assert!(s.alpha_bar[t] > 0.0 && s.alpha_bar[t] < 1.0);
            if t > 0 {
                assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            }
        }
    }

    #[test]
    fn beta_strictly_increasing() {
        let s = default_schedule();
        for t in 1..s.steps() {
            assert!(s.beta[t] > s.beta[t - 1]);
        }
    }

    #[test]
    fn degenerate_range_rejected() {
        assert!(matches!(
            build_schedule(150, 0.07, 0.07),
            Err(ScheduleError::InvalidRange { .. })
        ));
        assert!(matches!(build_schedule(1, 1e-4, 0.07), Err(ScheduleError::InvalidRange { .. })));
    }

    #[test]
    fn shrinkage_and_linearity() {
        let s = default_schedule();
        let x0 = Array4::from_elem((2, 3, 4, 4), 0.7f32);
        let zero = Array4::zeros((2, 3, 4, 4));
        let xt = forward_diffuse(&x0, 10, &zero, &s).unwrap();
        let expect = (s.alpha_bar[10].sqrt()) as f32 * 0.7;
        for &v in xt.iter() {
            assert!((v - expect).abs() < 1e-6);
        }
        // Linearity: f(2x, 2ε) = 2 f(x, ε).
        let eps = Array4::from_elem((2, 3, 4, 4), -0.3f32);
        let a = forward_diffuse(&x0, 99, &eps, &s).unwrap();
        let x2 = x0.mapv(|v| 2.0 * v);
        let e2 = eps.mapv(|v| 2.0 * v);
        let b = forward_diffuse(&x2, 99, &e2, &s).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((2.0 * u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn terminal_variance_matches_one_minus_alpha_bar() {
        let s = default_schedule();
        let t = s.steps() - 1;
        let x0 = Array4::from_elem((1, 1, 2, 2), 0.5f32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mut sum = [0.0f64; 4];
        let mut sumsq = [0.0f64; 4];
        for _ in 0..n {
            let eps = Array4::from_shape_fn((1, 1, 2, 2), |_| {
                <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng)
            });
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            for (i, &v) in xt.iter().enumerate() {
                sum[i] += v as f64;
                sumsq[i] += (v as f64) * (v as f64);
            }
        }
        let expected = 1.0 - s.alpha_bar[t];
        for i in 0..4 {
            let mean = sum[i] / n as f64;
            let var = sumsq[i] / n as f64 - mean * mean;
            assert!(
                (var - expected).abs() / expected < 0.05,
                "element {i}: var {var} vs {expected}"
            );
        }
    }
}
