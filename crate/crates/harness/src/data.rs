//! Synthetic binary classification tasks standing in for real corpora.
//!
//! * `pattern_classify`: label 1 iff the motif `1 2 3` occurs anywhere.
//! * `majority`: label is the parity of the most frequent token (ties go
//!   to the smaller token id).
//! * `held_out_eval`: the motif rule again, but training splits plant the
//!   motif in the first half of the sequence and the test split in the
//!   second half, so the test measures positional generalization.

use dpft_core::model::TokenBatch;
use dpft_core::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const MOTIF: [usize; 3] = [1, 2, 3];
const BALANCE: (f64, f64) = (0.4, 0.6);
const ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PatternClassify,
    Majority,
    HeldOutEval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Public,
    Private,
    Test,
}

impl Split {
    fn label(self) -> &'static str {
        match self {
            Split::Public => "data/public",
            Split::Private => "data/private",
            Split::Test => "data/test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: TokenBatch,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positive_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l == 1).count() as f64 / self.len().max(1) as f64
    }

    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset { inputs: self.inputs.select(idx)?, labels: idx.iter().map(|&i| self.labels[i]).collect() })
    }
}

pub fn motif_present(row: &[usize]) -> bool {
    row.windows(3).any(|w| w == MOTIF)
}

pub fn majority_label(row: &[usize], vocab: usize) -> usize {
    let mut counts = vec![0usize; vocab];
    for &t in row {
        counts[t] += 1;
    }
    let mut best = 0;
    for (t, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = t;
        }
    }
    best % 2
}

/// The labelling rule of `task` applied to one sequence.
pub fn oracle_label(task: Task, row: &[usize], vocab: usize) -> usize {
    match task {
        Task::PatternClassify | Task::HeldOutEval => motif_present(row) as usize,
        Task::Majority => majority_label(row, vocab),
    }
}

fn check_shape(seq_len: usize, vocab: usize) -> Result<()> {
    if vocab < 4 {
        return Err(HarnessError::Config(format!("vocab {vocab} is below 4")));
    }
    if seq_len < 4 {
        return Err(HarnessError::Config(format!("sequence length {seq_len} is below 4")));
    }
    Ok(())
}

/// Positions where a split may plant the motif.
fn motif_starts(task: Task, split: Split, seq_len: usize) -> std::ops::Range<usize> {
    let last = seq_len - MOTIF.len();
    match (task, split) {
        (Task::HeldOutEval, Split::Test) => (last / 2 + 1).min(last)..last + 1,
        (Task::HeldOutEval, _) => 0..last / 2 + 1,
        _ => 0..last + 1,
    }
}

/// Draws `n` examples without the balance check. Each example is positive
/// with probability `plant`: the motif is planted for the motif tasks;
/// `majority` ignores `plant` and labels uniform draws.
pub fn draw<R: Rng + ?Sized>(
    task: Task,
    split: Split,
    n: usize,
    seq_len: usize,
    vocab: usize,
    plant: f64,
    rng: &mut R,
) -> Dataset {
    let starts = motif_starts(task, split, seq_len);
    let mut ids = Vec::with_capacity(n * seq_len);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row: Vec<usize> = (0..seq_len).map(|_| rng.random_range(0..vocab)).collect();
        if task != Task::Majority {
            if rng.random::<f64>() < plant {
                let at = rng.random_range(starts.clone());
                row[at..at + 3].copy_from_slice(&MOTIF);
            } else {
                while motif_present(&row) {
                    row = (0..seq_len).map(|_| rng.random_range(0..vocab)).collect();
                }
            }
        }
        labels.push(oracle_label(task, &row, vocab));
        ids.extend(row);
    }
    Dataset { inputs: TokenBatch::new(ids, n, seq_len).expect("consistent sizes"), labels }
}

/// A label-balanced split of `task`. Redraws up to 100 times until the
/// positive fraction lies in [0.4, 0.6].
pub fn generate_split(task: Task, split: Split, n: usize, seq_len: usize, vocab: usize, seed: u64) -> Result<Dataset> {
    check_shape(seq_len, vocab)?;
    let mut r = rng::stream(seed, split.label());
    for _ in 0..ATTEMPTS {
        let d = draw(task, split, n, seq_len, vocab, 0.5, &mut r);
        let f = d.positive_fraction();
        if (BALANCE.0..=BALANCE.1).contains(&f) {
            return Ok(d);
        }
    }
    Err(HarnessError::Config(format!(
        "could not draw a balanced {task:?} split of {n} examples in {ATTEMPTS} attempts"
    )))
}

/// The public split of `task`, the source of pre-training data.
pub fn generate_dataset(task: Task, n: usize, seq_len: usize, vocab: usize, seed: u64) -> Result<Dataset> {
    generate_split(task, Split::Public, n, seq_len, vocab, seed)
}
