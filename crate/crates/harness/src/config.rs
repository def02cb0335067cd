//! Experiment configuration. Unknown keys are rejected everywhere: a typo
//! in a privacy parameter must not silently fall back to a default.

use std::path::{Path, PathBuf};

use dpft_accountant::{MechanismSpec, Method as Accountant};
use dpft_core::model::ModelConfig;
use dpft_core::optim::OptimConfig;
use dpft_core::peft::PeftSpec;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{io_at, HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peft: Option<PeftSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgp: Option<RgpConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<PrivacyConfig>,
    pub task: Task,
    pub n_public: usize,
    pub n_private: usize,
    pub n_test: usize,
    /// Fine-tuning epochs.
    pub epochs: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Minibatch size for non-private fine-tuning.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Fine-tuning optimizer.
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// Adds `wall_ms` to metrics records, which makes them
    /// run-dependent.
    #[serde(default)]
    pub record_timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 5, batch_size: 32, optimizer: OptimConfig::adamw(3e-3, 0.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RgpConfig {
    pub rank: usize,
    #[serde(default = "default_power_iters")]
    pub power_iters: usize,
}

/// Privacy settings of a fine-tuning run. Exactly one of
/// `noise_multiplier` and `target_epsilon` is given; a target is turned
/// into σ by calibration against the run's (q, T).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub clip_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_multiplier: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_epsilon: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub expected_batch: usize,
    #[serde(default = "default_accountant")]
    pub accountant: Accountant,
}

fn default_batch() -> usize {
    32
}
fn default_power_iters() -> usize {
    dpft_core::rgp::DEFAULT_POWER_ITERS
}
fn default_delta() -> f64 {
    1e-5
}
fn default_accountant() -> Accountant {
    Accountant::Prv
}

fn bad(field: &str, reason: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("`{field}`: {reason}"))
}

/// Fine-tuning method of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMethod {
    Adapter,
    Compacter,
    Full,
    Lora,
    Rgp,
}

impl RunMethod {
    pub fn name(self) -> &'static str {
        match self {
            RunMethod::Adapter => "adapter",
            RunMethod::Compacter => "compacter",
            RunMethod::Full => "full",
            RunMethod::Lora => "lora",
            RunMethod::Rgp => "rgp",
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.n_classes != 2 {
            return Err(bad("model.n_classes", "the synthetic tasks are binary"));
        }
        if self.model.vocab_size < 4 {
            return Err(bad("model.vocab_size", "must be at least 4"));
        }
        if self.model.max_seq_len < 4 {
            return Err(bad("model.max_seq_len", "must be at least 4"));
        }
        for (field, v) in [("n_public", self.n_public), ("n_private", self.n_private), ("n_test", self.n_test)] {
            if v == 0 {
                return Err(bad(field, "must be at least 1"));
            }
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if self.pretrain.batch_size == 0 {
            return Err(bad("pretrain.batch_size", "must be at least 1"));
        }
        self.optimizer.validate()?;
        self.pretrain.optimizer.validate()?;
        if self.peft.is_some() && self.rgp.is_some() {
            return Err(bad("rgp", "cannot be combined with `peft`"));
        }
        if let Some(spec) = &self.peft {
            spec.validate(&self.model)?;
        }
        if let Some(rgp) = &self.rgp {
            let smallest = self.model.d_model.min(self.model.d_ffn);
            if rgp.rank == 0 || rgp.rank > smallest {
                return Err(bad("rgp.rank", format!("must lie in [1, {smallest}]")));
            }
        }
        if let Some(dp) = &self.dp {
            if !(dp.clip_norm > 0.0 && dp.clip_norm.is_finite()) {
                return Err(bad("dp.clip_norm", "must be a finite positive number"));
            }
            match (dp.noise_multiplier, dp.target_epsilon) {
                (Some(_), Some(_)) | (None, None) => {
                    return Err(bad("dp", "give exactly one of `noise_multiplier` and `target_epsilon`"))
                }
                (Some(s), None) if !(s > 0.0 && s.is_finite()) => {
                    return Err(bad("dp.noise_multiplier", "must be positive; omit `dp` for a non-private run"))
                }
                (None, Some(e)) if !(e > 0.0 && e.is_finite()) => {
                    return Err(bad("dp.target_epsilon", "must be positive"))
                }
                _ => {}
            }
            if !(dp.delta > 0.0 && dp.delta < 1.0) {
                return Err(bad("dp.delta", "must lie in (0, 1)"));
            }
            if dp.expected_batch == 0 || dp.expected_batch > self.n_private {
                return Err(bad("dp.expected_batch", format!("must lie in [1, n_private = {}]", self.n_private)));
            }
            if self.epochs == 0 {
                return Err(bad("epochs", "a private run needs at least one epoch"));
            }
        }
        Ok(())
    }

    pub fn method(&self) -> RunMethod {
        match (&self.peft, &self.rgp) {
            (Some(spec), _) => match spec.method {
                dpft_core::peft::Method::Lora => RunMethod::Lora,
                dpft_core::peft::Method::Adapter => RunMethod::Adapter,
                dpft_core::peft::Method::Compacter => RunMethod::Compacter,
            },
            (None, Some(_)) => RunMethod::Rgp,
            (None, None) => RunMethod::Full,
        }
    }

    /// (q, T) of the private run with noise multiplier `sigma`.
    pub fn mechanism(&self, sigma: f64) -> Result<MechanismSpec> {
        let dp = self.dp.as_ref().ok_or_else(|| bad("dp", "missing"))?;
        Ok(MechanismSpec::from_training(self.n_private as u64, dp.expected_batch as u64, self.epochs as u64, sigma)?)
    }

    /// The noise multiplier, calibrating it when a target ε is given.
    pub fn resolve_sigma(&self) -> Result<Option<f64>> {
        let Some(dp) = &self.dp else {
            return Ok(None);
        };
        if let Some(s) = dp.noise_multiplier {
            return Ok(Some(s));
        }
        let target = dp.target_epsilon.expect("validated");
        let spec = self.mechanism(1.0)?;
        let sigma = dpft_accountant::calibrate_sigma(
            target,
            dp.delta,
            spec.q,
            spec.steps,
            dp.accountant,
            &dpft_accountant::PrvConfig::default(),
        )?;
        Ok(Some(sigma))
    }

    /// Stream seeds are split from the root seed by label.
    pub fn stream_seed(&self, label: &str) -> u64 {
        dpft_core::rng::derive_seed(self.seed, label)
    }
}

/// A compact config for the desk-scale tiny model, used by the CLI's
/// examples and by tests.
pub fn desk_config(output_dir: impl Into<PathBuf>) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig::tiny(0),
        peft: None,
        rgp: None,
        dp: None,
        task: Task::PatternClassify,
        n_public: 20_000,
        n_private: 2_000,
        n_test: 1_000,
        epochs: 10,
        seed: 0,
        output_dir: output_dir.into(),
        batch_size: 32,
        optimizer: OptimConfig::adamw(1e-3, 0.01),
        pretrain: PretrainConfig::default(),
        record_timing: false,
    }
}
