//! Privacy accounting for DP-SGD style training: repeated, Poisson-subsampled
//! Gaussian mechanisms.
//!
//! Two accountants are provided. [`pld`] discretizes the privacy loss random
//! variable on a uniform grid and composes it with FFT convolutions, which
//! gives numerically tight (ε, δ) estimates with an explicit error bound.
//! [`rdp`] uses Rényi DP and serves as an independent, looser upper bound.

pub mod calibrate;
mod normal;
pub mod pld;
pub mod rdp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calibrate::{calibrate_sigma, SIGMA_RANGE};
pub use pld::{
    build_pld, compose, delta_at_epsilon, epsilon_at_delta, prv_delta, prv_epsilon, Direction, Discretization,
    PrivacyLossDistribution, PrvConfig,
};
pub use rdp::{default_orders, rdp_epsilon};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountantError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("resource limit: {0}")]
    Resource(String),
    #[error("accuracy: {0}")]
    Accuracy(String),
    #[error("out of range: {0}")]
    Range(String),
}

pub type Result<T> = std::result::Result<T, AccountantError>;

/// T compositions of the Poisson-subsampled Gaussian with sampling rate `q`
/// and noise multiplier `sigma` (noise std divided by the sensitivity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
}

impl MechanismSpec {
    pub fn new(q: f64, sigma: f64, steps: u64) -> Result<Self> {
        let spec = MechanismSpec { q, sigma, steps };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec for `epochs` passes over `n` records with expected batch size
    /// `batch`: q = batch / n and T = epochs * ceil(n / batch).
    pub fn from_training(n: u64, batch: u64, epochs: u64, sigma: f64) -> Result<Self> {
        if n == 0 || batch == 0 || epochs == 0 {
            return Err(AccountantError::Config(format!(
                "n, batch and epochs must be positive (n={n}, batch={batch}, epochs={epochs})"
            )));
        }
        if batch > n {
            return Err(AccountantError::Config(format!("batch {batch} exceeds dataset size {n}")));
        }
        Self::new(batch as f64 / n as f64, sigma, epochs * n.div_ceil(batch))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(AccountantError::Config(format!("sampling rate q must lie in (0, 1], got {}", self.q)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(AccountantError::Config(format!(
                "noise multiplier must be positive and finite, got {}",
                self.sigma
            )));
        }
        if self.steps == 0 {
            return Err(AccountantError::Config("steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_sigma(&self, sigma: f64) -> Self {
        MechanismSpec { sigma, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Prv,
    Rdp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    pub epsilon: f64,
    pub delta: f64,
    /// Half-width of the interval the true ε is known to lie in.
    pub error_bound: f64,
    pub method: Method,
}

/// ε for `spec` at `delta` with the chosen accountant and default settings.
pub fn epsilon(spec: &MechanismSpec, delta: f64, method: Method) -> Result<EpsilonReport> {
    match method {
        Method::Prv => prv_epsilon(spec, delta, &PrvConfig::default()),
        Method::Rdp => rdp_epsilon(spec, delta, &default_orders()),
    }
}
