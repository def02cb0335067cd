//! Rényi DP accounting for the Poisson-subsampled Gaussian.
//!
//! Used as a loose but independent upper bound on the PLD accountant.

use crate::{AccountantError, EpsilonReport, MechanismSpec, Method, Result};

/// Orders used when no grid is given.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75];
    orders.extend((2..=64).map(f64::from));
    orders.extend([72.0, 80.0, 96.0, 128.0, 192.0, 256.0, 512.0, 1024.0]);
    orders
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn ln_binomial(n: u64, k: u64) -> f64 {
    let (n, k) = (n as f64, k as f64);
    libm::lgamma(n + 1.0) - libm::lgamma(k + 1.0) - libm::lgamma(n - k + 1.0)
}

/// (α − 1)·ε_RDP(α) for integer α ≥ 2, i.e. ln E_Q[(P/Q)^α].
fn cumulant_integer(q: f64, sigma: f64, alpha: u64) -> f64 {
    let s2 = sigma * sigma;
    if q >= 1.0 {
        let a = alpha as f64;
        return (a * a - a) / (2.0 * s2);
    }
    let (ln_q, ln_1mq) = (q.ln(), (-q).ln_1p());
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let kf = k as f64;
        let term = ln_binomial(alpha, k) + (alpha - k) as f64 * ln_1mq + kf * ln_q + (kf * kf - kf) / (2.0 * s2);
        acc = log_add(acc, term);
    }
    acc
}

/// (α − 1)·ε_RDP(α) for real α > 1. Between integers the cumulant is
/// replaced by its chord, which bounds it from above by convexity.
fn cumulant(q: f64, sigma: f64, alpha: f64) -> f64 {
    let lo = alpha.floor() as u64;
    let hi = alpha.ceil() as u64;
    let at = |a: u64| if a <= 1 { 0.0 } else { cumulant_integer(q, sigma, a) };
    if lo == hi {
        return at(lo);
    }
    let w = alpha - lo as f64;
    (1.0 - w) * at(lo) + w * at(hi)
}

/// RDP of one step at order α.
pub fn rdp_at_order(q: f64, sigma: f64, alpha: f64) -> f64 {
    cumulant(q, sigma, alpha) / (alpha - 1.0)
}

/// ε at `delta` after `spec.steps` steps, minimized over `orders`.
pub fn rdp_epsilon(spec: &MechanismSpec, delta: f64, orders: &[f64]) -> Result<EpsilonReport> {
    spec.validate()?;
    if orders.is_empty() {
        return Err(AccountantError::Config("RDP order grid is empty".into()));
    }
    if let Some(bad) = orders.iter().find(|&&a| !(a > 1.0 && a.is_finite())) {
        return Err(AccountantError::Config(format!("RDP orders must exceed 1, got {bad}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountantError::Config(format!("δ must lie in (0, 1), got {delta}")));
    }
    let t = spec.steps as f64;
    let eps = orders
        .iter()
        .map(|&a| t * rdp_at_order(spec.q, spec.sigma, a) + ((a - 1.0) / a).ln() - (delta.ln() + a.ln()) / (a - 1.0))
        .fold(f64::INFINITY, f64::min)
        .max(0.0);
    Ok(EpsilonReport { epsilon: eps, delta, error_bound: 0.0, method: Method::Rdp })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_is_gaussian_rdp() {
        for &s in &[0.5, 1.0, 3.0] {
            for a in 2..20u64 {
                let got = rdp_at_order(1.0, s, a as f64);
                assert!((got - a as f64 / (2.0 * s * s)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn small_q_rdp_is_near_quadratic() {
        // For small q the order-2 RDP is ln(1 + q²(e^{1/σ²} − 1)).
        let (q, s): (f64, f64) = (1e-3, 1.0);
        let expect = (q * q * ((1.0 / (s * s)).exp() - 1.0)).ln_1p();
        assert!((rdp_at_order(q, s, 2.0) - expect).abs() < 1e-15);
    }

    #[test]
    fn interpolation_bounds_from_above() {
        let (q, s) = (0.05, 0.9);
        let mid = rdp_at_order(q, s, 3.5) * 2.5;
        let chord = 0.5 * (rdp_at_order(q, s, 3.0) * 2.0 + rdp_at_order(q, s, 4.0) * 3.0);
        assert!((mid - chord).abs() < 1e-12);
    }

    #[test]
    fn empty_grid_is_config_error() {
        let spec = MechanismSpec::new(0.01, 1.0, 10).unwrap();
        assert!(matches!(rdp_epsilon(&spec, 1e-5, &[]), Err(AccountantError::Config(_))));
    }
}
