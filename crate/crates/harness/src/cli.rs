//! The `dpft` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpft_accountant::{calibrate_sigma, epsilon, MechanismSpec, PrvConfig};
use dpft_core::checkpoint::{load_checkpoint, save_checkpoint};
use dpft_core::peft::plugin::import_adapter;
use dpft_core::peft::{merge_lora, planned_count, TrainableCount};
use dpft_core::rgp::{default_targets, spectral_norm, stable_rank};
use dpft_core::Tensor;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::report;
use crate::train::{finetune_from_checkpoint, pretrain};

#[derive(Debug, Parser)]
#[command(name = "dpft", version, about = "Differentially private parameter-efficient fine-tuning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AccountantArg {
    Prv,
    Rdp,
}

impl From<AccountantArg> for dpft_accountant::Method {
    fn from(a: AccountantArg) -> Self {
        match a {
            AccountantArg::Prv => dpft_accountant::Method::Prv,
            AccountantArg::Rdp => dpft_accountant::Method::Rdp,
        }
    }
}

#[derive(Debug, Args)]
struct Training {
    /// Dataset size N.
    #[arg(long)]
    n: u64,
    /// Expected batch size B.
    #[arg(long)]
    batch: u64,
    #[arg(long)]
    epochs: u64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long, value_enum, default_value = "prv")]
    method: AccountantArg,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a base model on the public split.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune a base checkpoint on the private split.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// ε spent by a training run.
    Eps {
        #[command(flatten)]
        training: Training,
        #[arg(long)]
        sigma: f64,
    },
    /// Smallest noise multiplier meeting a target ε.
    Calibrate {
        #[command(flatten)]
        training: Training,
        #[arg(long)]
        target_eps: f64,
    },
    /// Fold a LoRA plug-in into its base checkpoint.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trainable parameter count of a config.
    CountParams {
        #[arg(long)]
        config: PathBuf,
    },
    /// Stable rank of a weight matrix, or of the change between two
    /// checkpoints.
    StableRank {
        #[arg(long, conflicts_with = "diff", required_unless_present = "diff")]
        ckpt: Option<PathBuf>,
        #[arg(long, num_args = 2, value_names = ["BEFORE", "AFTER"])]
        diff: Option<Vec<PathBuf>>,
        #[arg(long)]
        matrix: String,
    },
    /// Consolidate run directories into report.json, report.csv and a
    /// summary on stdout.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn matrix(path: &Path, name: &str) -> Result<Tensor> {
    let m = load_checkpoint(path)?;
    let p = m
        .params
        .get(name)
        .ok_or_else(|| HarnessError::Config(format!("no parameter `{name}` in {}", path.display())))?;
    Ok(p.value.clone())
}

fn count_params(cfg: &ExperimentConfig) -> Result<TrainableCount> {
    if cfg.rgp.is_some() {
        let plan = cfg.model.param_plan();
        let targets = default_targets(&cfg.model);
        let total: usize = plan.iter().map(|p| p.numel()).sum();
        let count: usize = plan.iter().filter(|p| targets.contains(&p.name)).map(|p| p.numel()).sum();
        return Ok(TrainableCount {
            count,
            fraction: count as f64 / total as f64,
            theta: 0,
            theta_matrices: 0,
            base_trainable: count,
            base_total: total,
        });
    }
    Ok(planned_count(&cfg.model, cfg.peft.as_ref())?)
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Pretrain { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = pretrain(&cfg)?;
            Ok(pretty(&json!({
                "checkpoint": out.checkpoint,
                "test_accuracy": out.test_accuracy,
                "epochs": out.records.len(),
            })))
        }
        Command::Finetune { config, ckpt } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = finetune_from_checkpoint(&cfg, &ckpt)?;
            Ok(pretty(&out.info))
        }
        Command::Eps { training: t, sigma } => {
            let spec = MechanismSpec::from_training(t.n, t.batch, t.epochs, sigma)?;
            Ok(pretty(&epsilon(&spec, t.delta, t.method.into())?))
        }
        Command::Calibrate { training: t, target_eps } => {
            let spec = MechanismSpec::from_training(t.n, t.batch, t.epochs, 1.0)?;
            let method = t.method.into();
            let sigma = calibrate_sigma(target_eps, t.delta, spec.q, spec.steps, method, &PrvConfig::default())?;
            let achieved = epsilon(&spec.with_sigma(sigma), t.delta, method)?;
            Ok(pretty(&json!({
                "sigma": sigma,
                "epsilon": achieved.epsilon,
                "delta": t.delta,
                "q": spec.q,
                "steps": spec.steps,
            })))
        }
        Command::Merge { base, adapter, out } => {
            let model = load_checkpoint(&base)?;
            let pm = import_adapter(model, &adapter)?;
            let merged = merge_lora(&pm)?;
            save_checkpoint(&merged, &out)?;
            Ok(pretty(&json!({ "out": out })))
        }
        Command::CountParams { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            Ok(pretty(&count_params(&cfg)?))
        }
        Command::StableRank { ckpt, diff, matrix: name } => {
            let w = match (ckpt, diff) {
                (Some(path), None) => matrix(&path, &name)?,
                (None, Some(pair)) => {
                    let (a, b) = (matrix(&pair[0], &name)?, matrix(&pair[1], &name)?);
                    if a.shape() != b.shape() {
                        return Err(HarnessError::Config(format!(
                            "`{name}` has different shapes in the two checkpoints"
                        )));
                    }
                    Tensor::new(a.shape().to_vec(), b.data().iter().zip(a.data()).map(|(x, y)| x - y).collect())?
                }
                _ => return Err(HarnessError::Config("give either --ckpt or --diff".into())),
            };
            Ok(pretty(&json!({
                "matrix": name,
                "stable_rank": stable_rank(&w)?,
                "frobenius_norm": w.norm(),
                "spectral_norm": spectral_norm(&w)?,
            })))
        }
        Command::Report { dir } => {
            let rows = report::report(&dir)?;
            Ok(report::summary(&rows).trim_end().to_string())
        }
    }
}

/// Runs the command line and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(out) => {
            println!("{out}");
            0
        }
        Err(e) => {
            eprintln!("dpft: {e}");
            e.exit_code()
        }
    }
}
