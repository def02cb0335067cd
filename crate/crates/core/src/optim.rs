//! DP-SGD and DP-AdamW: Poisson subsampling, per-example clipping to a
//! global ℓ₂ bound, Gaussian noise scaled to the bound, then an ordinary
//! optimizer step on the privatized gradient.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::PerExampleGradients;
use crate::error::{config_err, Error, Result};
use crate::model::{Network, TokenBatch};
use crate::param::ParamAccess;
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimConfig {
            learning_rate,
            weight_decay: 0.0,
            optimizer: OptimizerKind::Sgd,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
        }
    }

    pub fn adamw(learning_rate: f64, weight_decay: f64) -> Self {
        OptimConfig { optimizer: OptimizerKind::Adamw, weight_decay, ..OptimConfig::sgd(learning_rate) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err("learning_rate", "must be a finite non-negative number"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err("weight_decay", "must be a finite non-negative number"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err(field, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(config_err("adam_eps", "must be positive"));
        }
        Ok(())
    }
}

/// First-order optimizer state over named parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimConfig,
    pub t: u64,
    m: GradMap,
    v: GradMap,
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer { config, t: 0, m: GradMap::new(), v: GradMap::new() })
    }

    /// One descent step. Frozen parameters are left untouched.
    pub fn apply<P: ParamAccess + ?Sized>(&mut self, params: &mut P, grads: &GradMap) -> Result<()> {
        for (name, g) in grads {
            let p = params.param(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if p.value.shape() != g.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    found: g.shape().to_vec(),
                    expected: p.value.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let c = &self.config;
        let lr = c.learning_rate;
        for (name, g) in grads {
            let p = params.param_mut(name).expect("checked above");
            if !p.trainable {
                continue;
            }
            let w = p.value.data_mut();
            match c.optimizer {
                OptimizerKind::Sgd => {
                    for (wi, gi) in w.iter_mut().zip(g.data()) {
                        *wi -= lr * gi;
                    }
                }
                OptimizerKind::Adamw => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let bc1 = 1.0 - c.beta1.powf(self.t as f64);
                    let bc2 = 1.0 - c.beta2.powf(self.t as f64);
                    let (m, v) = (m.data_mut(), v.data_mut());
                    for i in 0..w.len() {
                        let gi = g.data()[i];
                        w[i] -= lr * c.weight_decay * w[i];
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        w[i] -= lr * mhat / (vhat.sqrt() + c.adam_eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub expected_batch: usize,
    pub dataset_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Must be set to run with σ = 0.
    #[serde(default)]
    pub non_private: bool,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(config_err("clip_norm", "must be a finite positive number"));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(config_err("noise_multiplier", "must be a finite non-negative number"));
        }
        if self.noise_multiplier == 0.0 && !self.non_private {
            return Err(config_err(
                "noise_multiplier",
                "zero noise is only allowed when the run is flagged non_private",
            ));
        }
        if self.dataset_size == 0 {
            return Err(config_err("dataset_size", "must be positive"));
        }
        if self.expected_batch == 0 || self.expected_batch > self.dataset_size {
            return Err(config_err("expected_batch", "must lie in [1, dataset_size]"));
        }
        self.optim().validate()
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            optimizer: self.optimizer,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
        }
    }

    /// A private config with the given optimizer settings.
    pub fn new(
        clip_norm: f64,
        noise_multiplier: f64,
        expected_batch: usize,
        dataset_size: usize,
        optim: &OptimConfig,
    ) -> Self {
        DpConfig {
            clip_norm,
            noise_multiplier,
            expected_batch,
            dataset_size,
            learning_rate: optim.learning_rate,
            weight_decay: optim.weight_decay,
            optimizer: optim.optimizer,
            beta1: optim.beta1,
            beta2: optim.beta2,
            adam_eps: optim.adam_eps,
            seed: 0,
            non_private: false,
        }
    }

    pub fn sampling_rate(&self) -> f64 {
        self.expected_batch as f64 / self.dataset_size as f64
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.dataset_size.div_ceil(self.expected_batch)
    }
}

/// Includes each of `0..n` independently with probability `q`.
pub fn poisson_sample<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> Vec<usize> {
    (0..n).filter(|_| rng.random::<f64>() < q).collect()
}

/// Per-example gradients after clipping.
#[derive(Debug, Clone)]
pub struct Clipped {
    pub grads: PerExampleGradients,
    /// Norms before clipping.
    pub norms: Vec<f64>,
}

impl Clipped {
    /// Sum over examples in index order.
    pub fn sum(&self) -> GradMap {
        self.grads.summed().grads
    }

    pub fn clipped_fraction(&self, c: f64) -> f64 {
        if self.norms.is_empty() {
            return 0.0;
        }
        self.norms.iter().filter(|&&n| n > c).count() as f64 / self.norms.len() as f64
    }
}

/// Squared norm of example `e` scaled by `factor`, accumulated in one
/// running sum over parameters in name order.
fn example_sq_norm(per: &PerExampleGradients, e: usize, factor: f64) -> f64 {
    let mut acc = 0.0;
    for t in per.grads.values() {
        let stride = t.numel() / per.batch;
        for x in &t.data()[e * stride..(e + 1) * stride] {
            acc += (x * factor) * (x * factor);
        }
    }
    acc
}

/// ℓ₂ norm of every example's gradient over all parameters.
pub fn per_example_norms(per: &PerExampleGradients) -> Vec<f64> {
    (0..per.batch).map(|e| example_sq_norm(per, e, 1.0).sqrt()).collect()
}

/// Scales each example's gradient by `min(1, C/‖g‖)`.
pub fn clip_per_example(per: &PerExampleGradients, c: f64) -> Result<Clipped> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(config_err("clip_norm", "must be a finite positive number"));
    }
    let norms = per_example_norms(per);
    let mut grads = per.clone();
    for (e, &norm) in norms.iter().enumerate() {
        if norm <= c {
            continue;
        }
        let mut factor = c / norm;
        // Guard against the scaled norm rounding to just above C.
        loop {
            let scaled = example_sq_norm(per, e, factor).sqrt();
            if scaled <= c {
                break;
            }
            factor *= 1.0 - f64::EPSILON;
        }
        for t in grads.grads.values_mut() {
            let stride = t.numel() / per.batch;
            for x in &mut t.data_mut()[e * stride..(e + 1) * stride] {
                *x *= factor;
            }
        }
    }
    Ok(Clipped { grads, norms })
}

/// Errors unless every name in `trainable` has a per-example gradient.
pub fn check_complete(per: &PerExampleGradients, trainable: &[String]) -> Result<()> {
    if let Some(missing) = trainable.iter().find(|n| !per.grads.contains_key(*n)) {
        return Err(Error::State(format!("no per-example gradient for trainable parameter `{missing}`")));
    }
    Ok(())
}

/// `(sum + z) / B` with `z ~ N(0, σ²C²)` per coordinate, drawn in name order.
pub fn privatize<R: Rng + ?Sized>(sum: &GradMap, c: f64, sigma: f64, b: usize, rng: &mut R) -> GradMap {
    let std = sigma * c;
    let inv_b = 1.0 / b as f64;
    sum.iter()
        .map(|(name, g)| {
            let mut noise = vec![0.0; g.numel()];
            if std > 0.0 {
                rng::fill_normal(rng, &mut noise, std);
            }
            let data = g.data().iter().zip(&noise).map(|(x, z)| (x + z) * inv_b).collect();
            (name.clone(), Tensor::new(g.shape().to_vec(), data).expect("same shape"))
        })
        .collect()
}

/// Summary of one private step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub batch_size: usize,
    pub mean_loss: f64,
    pub clipped_fraction: f64,
}

/// DP optimizer with its own sampling and noise streams.
#[derive(Debug, Clone)]
pub struct DpOptimizer {
    pub config: DpConfig,
    pub optimizer: Optimizer,
    sample_rng: StreamRng,
    noise_rng: StreamRng,
}

impl DpOptimizer {
    pub fn new(config: DpConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optim())?;
        let sample_rng = rng::stream(config.seed, "dp/sample");
        let noise_rng = rng::stream(config.seed, "dp/noise");
        Ok(DpOptimizer { config, optimizer, sample_rng, noise_rng })
    }

    pub fn steps(&self) -> u64 {
        self.optimizer.t
    }

    pub fn sample(&mut self) -> Vec<usize> {
        poisson_sample(self.config.dataset_size, self.config.sampling_rate(), &mut self.sample_rng)
    }

    /// Clipped sum to privatized mean.
    pub fn privatize(&mut self, clipped_sum: &GradMap) -> GradMap {
        let c = &self.config;
        privatize(clipped_sum, c.clip_norm, c.noise_multiplier, c.expected_batch, &mut self.noise_rng)
    }

    /// One DP step on `net` over a Poisson sample of `data`. An empty sample
    /// still takes a step on pure noise.
    pub fn step<N: Network + ?Sized>(&mut self, net: &mut N, data: &TokenBatch, labels: &[usize]) -> Result<StepStats> {
        if data.batch != self.config.dataset_size {
            return Err(config_err(
                "dataset_size",
                format!("configured {} but the data holds {}", self.config.dataset_size, data.batch),
            ));
        }
        let idx = self.sample();
        let trainable = net.trainable_names();
        let (sum, mean_loss, clipped_fraction) = if idx.is_empty() {
            let zeros = net.trainable_shapes().into_iter().map(|p| (p.name, Tensor::zeros(&p.shape))).collect();
            (zeros, f64::NAN, 0.0)
        } else {
            let batch = data.select(&idx)?;
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (losses, per) = net.per_example(&batch, &batch_labels)?;
            check_complete(&per, &trainable)?;
            let clipped = clip_per_example(&per, self.config.clip_norm)?;
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            (clipped.sum(), mean, clipped.clipped_fraction(self.config.clip_norm))
        };
        let noisy = self.privatize(&sum);
        self.optimizer.apply(net, &noisy)?;
        Ok(StepStats { batch_size: idx.len(), mean_loss, clipped_fraction })
    }
}
