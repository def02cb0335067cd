//! Noise calibration: the smallest noise multiplier meeting a target ε.

use crate::{pld, rdp, AccountantError, MechanismSpec, Method, PrvConfig, Result};

/// Search interval for σ.
pub const SIGMA_RANGE: (f64, f64) = (0.3, 50.0);

const TOLERANCE: f64 = 0.01;
const MAX_ITERATIONS: usize = 60;

/// σ such that `spec.with_sigma(σ)` spends at most `target_eps` at `delta`.
///
/// Bisects over [`SIGMA_RANGE`] until ε is within 0.01 below the target or
/// 60 iterations have run, and returns the smallest tested σ whose ε does
/// not exceed the target.
pub fn calibrate_sigma(
    target_eps: f64,
    delta: f64,
    q: f64,
    steps: u64,
    method: Method,
    config: &PrvConfig,
) -> Result<f64> {
    if !(target_eps > 0.0 && target_eps.is_finite()) {
        return Err(AccountantError::Config(format!("target ε must be positive, got {target_eps}")));
    }
    let (lo_sigma, hi_sigma) = SIGMA_RANGE;
    let base = MechanismSpec::new(q, hi_sigma, steps)?;
    let eps_of = |sigma: f64| -> Result<f64> {
        let spec = base.with_sigma(sigma);
        Ok(match method {
            Method::Prv => pld::prv_epsilon(&spec, delta, config)?.epsilon,
            Method::Rdp => rdp::rdp_epsilon(&spec, delta, &rdp::default_orders())?.epsilon,
        })
    };

    if eps_of(lo_sigma)? <= target_eps {
        return Ok(lo_sigma);
    }
    let eps_hi = eps_of(hi_sigma)?;
    if eps_hi > target_eps {
        return Err(AccountantError::Range(format!(
            "target ε={target_eps} needs σ above {hi_sigma} (ε at σ={hi_sigma} is {eps_hi:.4})"
        )));
    }
    let (mut lo, mut hi, mut eps_at_hi) = (lo_sigma, hi_sigma, eps_hi);
    for _ in 0..MAX_ITERATIONS {
        if target_eps - eps_at_hi <= TOLERANCE {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let e = eps_of(mid)?;
        if e <= target_eps {
            hi = mid;
            eps_at_hi = e;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
