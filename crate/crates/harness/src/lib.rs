//! Synthetic tasks, training loops, reporting and the `dpft` command line.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod report;
pub mod train;

pub use config::{desk_config, ExperimentConfig, PretrainConfig, PrivacyConfig, RgpConfig, RunMethod};
pub use data::{generate_dataset, generate_split, Dataset, Split, Task};
pub use error::{HarnessError, Result};
pub use train::{evaluate, finetune, finetune_from_checkpoint, pretrain, FinetuneOutcome, MetricsRecord, RunInfo};
