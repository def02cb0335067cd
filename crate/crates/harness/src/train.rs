//! Pre-training on the public split and fine-tuning on the private split.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dpft_accountant::{EpsilonReport, MechanismSpec};
use dpft_core::checkpoint::{load_checkpoint, save_checkpoint};
use dpft_core::model::{build_model, Model, ModelConfig, Network};
use dpft_core::optim::{DpConfig, DpOptimizer, Optimizer};
use dpft_core::peft::plugin::export_adapter;
use dpft_core::peft::{attach, count_trainable, count_trainable_model, TrainableCount};
use dpft_core::rgp::{default_targets, prepare_model, rgp_batch_step, rgp_model_step, stable_rank, RgpState};
use dpft_core::rng::{self, StreamRng};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RunMethod};
use crate::data::{generate_split, Dataset, Split, Task};
use crate::error::{io_at, HarnessError, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const PRETRAIN_METRICS_FILE: &str = "pretrain.jsonl";
pub const BASE_CHECKPOINT: &str = "base.dpft";
pub const ADAPTER_FILE: &str = "adapter.dpfa";
pub const MODEL_FILE: &str = "model.dpft";

/// One line of a metrics file, written after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: u64,
    /// Mean training loss over the epoch's non-empty batches.
    pub train_loss: Option<f64>,
    pub eval_accuracy: f64,
    /// ε spent after `step` steps; absent for non-private runs.
    pub epsilon_spent: Option<f64>,
    pub trainable_params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

/// Summary of a fine-tuning run, written next to its metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub method: RunMethod,
    pub private: bool,
    pub task: Task,
    pub seed: u64,
    pub sigma: Option<f64>,
    pub delta: Option<f64>,
    pub epsilon: Option<f64>,
    pub epsilon_error_bound: Option<f64>,
    pub steps: u64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub trainable_fraction: f64,
    pub test_accuracy: f64,
    /// Bytes of per-example gradient buffers for an expected batch. A
    /// desk-scale proxy for memory cost, not a measured footprint.
    pub per_example_buffer_bytes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgp_stable_rank: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: Model,
    pub test_accuracy: f64,
    pub records: Vec<MetricsRecord>,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub info: RunInfo,
    pub records: Vec<MetricsRecord>,
    /// Adapter plug-in or fine-tuned checkpoint.
    pub artifact: PathBuf,
}

/// Fraction of correct argmax predictions.
pub fn evaluate<N: Network + ?Sized>(net: &N, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let part = data.select(chunk)?;
        let pred = net.predict(&part.inputs)?;
        correct += pred.iter().zip(&part.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

fn splits(cfg: &ExperimentConfig, split: Split, n: usize) -> Result<Dataset> {
    generate_split(cfg.task, split, n, cfg.model.max_seq_len, cfg.model.vocab_size, cfg.seed)
}

fn diverged(step: u64) -> HarnessError {
    HarnessError::Numeric(format!("loss is not finite at step {}; last good step {step}", step + 1))
}

/// Attaches the step to non-finite values met inside a training step.
fn at_step<T>(r: dpft_core::Result<T>, step: u64) -> Result<T> {
    r.map_err(|e| match e {
        dpft_core::Error::Numeric { .. } => {
            HarnessError::Numeric(format!("{e} at step {}; last good step {step}", step + 1))
        }
        other => other.into(),
    })
}

/// One pass of shuffled minibatch training. Returns the mean loss.
fn plain_epoch<N: Network + ?Sized>(
    net: &mut N,
    data: &Dataset,
    batch: usize,
    opt: &mut Optimizer,
    shuffle: &mut StreamRng,
    step: &mut u64,
) -> Result<Option<f64>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(shuffle);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in order.chunks(batch) {
        let part = data.select(chunk)?;
        let (loss, grads) = at_step(net.loss_and_grads(&part.inputs, &part.labels), *step)?;
        if !loss.is_finite() {
            return Err(diverged(*step));
        }
        at_step(opt.apply(net, &grads.grads), *step)?;
        *step += 1;
        total += loss;
        count += 1;
    }
    Ok((count > 0).then(|| total / count as f64))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_at(path))?);
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| HarnessError::Io(e.to_string()))?;
        writeln!(f, "{line}").map_err(io_at(path))?;
    }
    f.flush().map_err(io_at(path))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_at(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))
}

/// Non-private training of a fresh model on the public split. Saves
/// `base.dpft` and `pretrain.jsonl` in the output directory.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    let mut model = build_model(&cfg.model)?;
    let public = splits(cfg, Split::Public, cfg.n_public)?;
    let test = splits(cfg, Split::Test, cfg.n_test)?;
    let mut opt = Optimizer::new(cfg.pretrain.optimizer.clone())?;
    let mut shuffle = rng::stream(cfg.seed, "pretrain/shuffle");
    let trainable = count_trainable_model(&model).count;
    let start = Instant::now();
    let mut records = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.pretrain.epochs {
        let loss = plain_epoch(&mut model, &public, cfg.pretrain.batch_size, &mut opt, &mut shuffle, &mut step)?;
        records.push(MetricsRecord {
            epoch: epoch + 1,
            step,
            train_loss: loss,
            eval_accuracy: evaluate(&model, &test)?,
            epsilon_spent: None,
            trainable_params: trainable,
            wall_ms: cfg.record_timing.then(|| start.elapsed().as_millis() as u64),
        });
    }
    let test_accuracy = match records.last() {
        Some(r) => r.eval_accuracy,
        None => evaluate(&model, &test)?,
    };
    create_dir(&cfg.output_dir)?;
    let checkpoint = cfg.output_dir.join(BASE_CHECKPOINT);
    save_checkpoint(&model, &checkpoint)?;
    write_jsonl(&cfg.output_dir.join(PRETRAIN_METRICS_FILE), &records)?;
    Ok(PretrainOutcome { model, test_accuracy, records, checkpoint })
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    ModelConfig { seed: 0, ..a.clone() } == ModelConfig { seed: 0, ..b.clone() }
}

/// Privacy bookkeeping of a private run.
struct Privacy {
    q: f64,
    sigma: f64,
    delta: f64,
    method: dpft_accountant::Method,
}

impl Privacy {
    fn epsilon(&self, steps: u64) -> Result<EpsilonReport> {
        let spec = MechanismSpec::new(self.q, self.sigma, steps)?;
        Ok(dpft_accountant::epsilon(&spec, self.delta, self.method)?)
    }
}

/// Collects per-epoch records.
struct Recorder<'a> {
    cfg: &'a ExperimentConfig,
    test: &'a Dataset,
    privacy: Option<Privacy>,
    trainable: usize,
    start: Instant,
    records: Vec<MetricsRecord>,
}

impl Recorder<'_> {
    fn epoch<N: Network + ?Sized>(&mut self, net: &N, epoch: usize, step: u64, loss: Option<f64>) -> Result<()> {
        let epsilon_spent = match &self.privacy {
            Some(p) => Some(p.epsilon(step)?.epsilon),
            None => None,
        };
        self.records.push(MetricsRecord {
            epoch,
            step,
            train_loss: loss,
            eval_accuracy: evaluate(net, self.test)?,
            epsilon_spent,
            trainable_params: self.trainable,
            wall_ms: self.cfg.record_timing.then(|| self.start.elapsed().as_millis() as u64),
        });
        Ok(())
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn dp_config(cfg: &ExperimentConfig, sigma: f64) -> DpConfig {
    let dp = cfg.dp.as_ref().expect("private run");
    let mut c = DpConfig::new(dp.clip_norm, sigma, dp.expected_batch, cfg.n_private, &cfg.optimizer);
    c.seed = cfg.stream_seed("dp");
    c
}

/// Trains any network through the ordinary or the private optimizer.
fn train_network<N: Network + ?Sized>(
    net: &mut N,
    cfg: &ExperimentConfig,
    private: &Dataset,
    sigma: Option<f64>,
    rec: &mut Recorder<'_>,
) -> Result<u64> {
    let mut step = 0u64;
    match sigma {
        Some(sigma) => {
            let mut dp = DpOptimizer::new(dp_config(cfg, sigma))?;
            let per_epoch = dp.config.steps_per_epoch();
            for epoch in 1..=cfg.epochs {
                let mut losses = Vec::new();
                for _ in 0..per_epoch {
                    let stats = at_step(dp.step(net, &private.inputs, &private.labels), step)?;
                    if stats.batch_size > 0 {
                        if !stats.mean_loss.is_finite() {
                            return Err(diverged(step));
                        }
                        losses.push(stats.mean_loss);
                    }
                    step += 1;
                }
                rec.epoch(net, epoch, step, mean(&losses))?;
            }
        }
        None => {
            let mut opt = Optimizer::new(cfg.optimizer.clone())?;
            let mut shuffle = rng::stream(cfg.stream_seed("finetune"), "shuffle");
            for epoch in 1..=cfg.epochs {
                let loss = plain_epoch(net, private, cfg.batch_size, &mut opt, &mut shuffle, &mut step)?;
                rec.epoch(net, epoch, step, loss)?;
            }
        }
    }
    Ok(step)
}

fn train_rgp(
    model: &mut Model,
    state: &mut RgpState,
    cfg: &ExperimentConfig,
    private: &Dataset,
    sigma: Option<f64>,
    rec: &mut Recorder<'_>,
) -> Result<u64> {
    let mut step = 0u64;
    match sigma {
        Some(sigma) => {
            let mut dp = DpOptimizer::new(dp_config(cfg, sigma))?;
            let per_epoch = dp.config.steps_per_epoch();
            for epoch in 1..=cfg.epochs {
                let mut losses = Vec::new();
                for _ in 0..per_epoch {
                    let stats = at_step(rgp_model_step(model, state, &mut dp, &private.inputs, &private.labels), step)?;
                    if stats.batch_size > 0 {
                        if !stats.mean_loss.is_finite() {
                            return Err(diverged(step));
                        }
                        losses.push(stats.mean_loss);
                    }
                    step += 1;
                }
                rec.epoch(model, epoch, step, mean(&losses))?;
            }
        }
        None => {
            // Unclipped and noiseless: the carriers go straight to the
            // optimizer, averaged over the minibatch size.
            let batch = cfg.batch_size.min(private.len());
            let mut c = DpConfig::new(f64::MAX, 0.0, batch, private.len(), &cfg.optimizer);
            c.non_private = true;
            let mut dp = DpOptimizer::new(c)?;
            let mut shuffle = rng::stream(cfg.stream_seed("finetune"), "shuffle");
            for epoch in 1..=cfg.epochs {
                let mut order: Vec<usize> = (0..private.len()).collect();
                order.shuffle(&mut shuffle);
                let mut losses = Vec::new();
                for chunk in order.chunks(batch) {
                    let part = private.select(chunk)?;
                    let stats =
                        at_step(rgp_batch_step(model, state, &mut dp, Some((&part.inputs, &part.labels))), step)?;
                    if !stats.mean_loss.is_finite() {
                        return Err(diverged(step));
                    }
                    losses.push(stats.mean_loss);
                    step += 1;
                }
                rec.epoch(model, epoch, step, mean(&losses))?;
            }
        }
    }
    Ok(step)
}

/// Fine-tunes `base` on the private split as configured and writes
/// `metrics.jsonl`, `run.json` and the adapter or model artifact.
pub fn finetune(cfg: &ExperimentConfig, base: Model) -> Result<FinetuneOutcome> {
    if !same_architecture(&base.config, &cfg.model) {
        return Err(dpft_core::Error::Compatibility(format!(
            "checkpoint model {:?} does not match the configured model {:?}",
            base.config, cfg.model
        ))
        .into());
    }
    let private = splits(cfg, Split::Private, cfg.n_private)?;
    let test = splits(cfg, Split::Test, cfg.n_test)?;
    let sigma = cfg.resolve_sigma()?;
    let privacy = match (&cfg.dp, sigma) {
        (Some(dp), Some(sigma)) => Some(Privacy {
            q: dp.expected_batch as f64 / cfg.n_private as f64,
            sigma,
            delta: dp.delta,
            method: dp.accountant,
        }),
        _ => None,
    };
    create_dir(&cfg.output_dir)?;
    let mut rec = Recorder { cfg, test: &test, privacy, trainable: 0, start: Instant::now(), records: Vec::new() };

    let method = cfg.method();
    let mut rgp_stable_rank = None;
    let (count, steps, accuracy, artifact): (TrainableCount, u64, f64, PathBuf) = match method {
        RunMethod::Full | RunMethod::Rgp => {
            let mut model = base;
            model.unfreeze("*")?;
            let mut rgp_state = None;
            if let Some(rgp) = &cfg.rgp {
                let targets = default_targets(&model.config);
                prepare_model(&mut model, &targets)?;
                let mut state = RgpState::new(&model, &targets, rgp.rank)?;
                state.power_iters = rgp.power_iters;
                rgp_state = Some(state);
            }
            let count = count_trainable_model(&model);
            rec.trainable = count.count;
            let steps = match rgp_state.as_mut() {
                Some(state) => train_rgp(&mut model, state, cfg, &private, sigma, &mut rec)?,
                None => train_network(&mut model, cfg, &private, sigma, &mut rec)?,
            };
            if let Some(state) = rgp_state {
                let mut ranks = BTreeMap::new();
                for (name, acc) in &state.accumulated {
                    if acc.norm_sq() > 0.0 {
                        ranks.insert(name.clone(), stable_rank(acc)?);
                    }
                }
                rgp_stable_rank = Some(ranks);
            }
            let accuracy = evaluate(&model, &test)?;
            let path = cfg.output_dir.join(MODEL_FILE);
            save_checkpoint(&model, &path)?;
            (count, steps, accuracy, path)
        }
        RunMethod::Lora | RunMethod::Adapter | RunMethod::Compacter => {
            let spec = cfg.peft.as_ref().expect("peft method");
            let mut pm = attach(base, spec, cfg.stream_seed("peft/init"))?;
            let count = count_trainable(&pm);
            rec.trainable = count.count;
            let steps = train_network(&mut pm, cfg, &private, sigma, &mut rec)?;
            let accuracy = evaluate(&pm, &test)?;
            let path = cfg.output_dir.join(ADAPTER_FILE);
            export_adapter(&pm, &path)?;
            (count, steps, accuracy, path)
        }
    };

    let final_eps = match &rec.privacy {
        Some(p) => Some(p.epsilon(steps)?),
        None => None,
    };
    let info = RunInfo {
        method,
        private: sigma.is_some(),
        task: cfg.task,
        seed: cfg.seed,
        sigma,
        delta: cfg.dp.as_ref().map(|d| d.delta),
        epsilon: final_eps.map(|r| r.epsilon),
        epsilon_error_bound: final_eps.map(|r| r.error_bound),
        steps,
        trainable_params: count.count,
        total_params: count.base_total + count.theta,
        trainable_fraction: count.fraction,
        test_accuracy: accuracy,
        per_example_buffer_bytes: cfg.dp.as_ref().map(|d| d.expected_batch * count.count * cfg.model.dtype.size_of()),
        rgp_stable_rank,
    };
    let records = std::mem::take(&mut rec.records);
    write_jsonl(&cfg.output_dir.join(METRICS_FILE), &records)?;
    write_json(&cfg.output_dir.join(RUN_FILE), &info)?;
    Ok(FinetuneOutcome { info, records, artifact })
}

pub fn finetune_from_checkpoint(cfg: &ExperimentConfig, ckpt: &Path) -> Result<FinetuneOutcome> {
    let base = load_checkpoint(ckpt)?;
    finetune(cfg, base)
}
