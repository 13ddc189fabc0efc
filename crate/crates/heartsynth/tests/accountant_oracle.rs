//! The accountant's series evaluation against brute-force quadrature.
//!
//! The series and the integral are two unrelated routes to the same
//! divergence; agreeing to a fraction of a percent across sample rates,
//! noise levels, and orders (integer and fractional) rules out sign,
//! branch, and convergence mistakes in either.

mod support;

use heartsynth::dp::accountant::{epsilon_spent, rdp_step};
use support::{oracle_epsilon, oracle_rdp};

#[test]
fn series_matches_quadrature_across_the_grid() {
    let orders = [1.25, 2.0, 7.75, 32.0, 64.0, 128.0];
    for &q in &[0.01, 0.128, 0.5] {
        for &sigma in &[0.5, 1.0, 4.0] {
            for &alpha in &orders {
                let series = rdp_step(q, sigma, alpha);
                let quad = oracle_rdp(q, sigma, alpha);
                let denom = quad.abs().max(1e-12);
                let rel = (series - quad).abs() / denom;
                assert!(
                    rel < 1e-3,
                    "q={q} sigma={sigma} alpha={alpha}: series {series} vs quadrature {quad}"
                );
            }
        }
    }
}

#[test]
fn composed_epsilon_matches_quadrature() {
    let eps = epsilon_spent(0.01, 1.0, 1000, 1e-5);
    let oracle = oracle_epsilon(0.01, 1.0, 1000, 1e-5);
    let rel = (eps - oracle).abs() / oracle.max(1e-12);
    assert!(rel < 5e-3, "accountant {eps} vs oracle {oracle}");
    // A second regime: larger rate, less noise, fewer steps.
    let eps = epsilon_spent(0.128, 0.8, 600, 1e-5);
    let oracle = oracle_epsilon(0.128, 0.8, 600, 1e-5);
    let rel = (eps - oracle).abs() / oracle.max(1e-12);
    assert!(rel < 5e-3, "accountant {eps} vs oracle {oracle}");
}
