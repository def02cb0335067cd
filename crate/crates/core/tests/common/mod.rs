#![allow(dead_code)]

use dpft_core::model::{build_model, Model, ModelConfig, Network, TokenBatch};
use dpft_core::param::ParamAccess;
use dpft_core::rng;
use dpft_core::Tensor;
use rand::Rng;

/// A small model whose weights are spread out enough that every path
/// through it matters numerically.
pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 10,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ffn: 16,
        max_seq_len: 6,
        n_classes: 3,
        seed,
        dtype: Default::default(),
    }
}

pub fn spread_model(config: &ModelConfig) -> Model {
    let mut m = build_model(config).unwrap();
    let mut r = rng::stream(config.seed, "test/spread");
    for p in m.params.iter_mut() {
        for x in p.value.data_mut() {
            *x += r.random_range(-0.4..0.4);
        }
    }
    m
}

pub fn random_batch(seed: u64, config: &ModelConfig, batch: usize, seq: usize) -> (TokenBatch, Vec<usize>) {
    let mut r = rng::stream(seed, "test/batch");
    let ids = (0..batch * seq).map(|_| r.random_range(0..config.vocab_size)).collect();
    let labels = (0..batch).map(|_| r.random_range(0..config.n_classes)).collect();
    (TokenBatch::new(ids, batch, seq).unwrap(), labels)
}

/// Adds uniform noise to every parameter whose name matches `filter`.
pub fn perturb<N: ParamAccess>(net: &mut N, names: &[String], seed: u64, scale: f64) {
    let mut r = rng::stream(seed, "test/perturb");
    for n in names {
        let p = net.param_mut(n).unwrap();
        for x in p.value.data_mut() {
            *x += r.random_range(-scale..scale);
        }
    }
}

pub fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

pub fn rel(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.max_abs_diff(b);
    let s = a.data().iter().chain(b.data()).fold(0.0f64, |m, x| m.max(x.abs()));
    if s == 0.0 {
        d
    } else {
        d / s
    }
}

/// Norm-wise relative error of every trainable gradient of `net` against
/// central differences (h = 1e-5) of the mean loss.
pub fn fd_max_rel_error<N: Network + Clone>(net: &N, batch: &TokenBatch, labels: &[usize]) -> f64 {
    let h = 1e-5;
    let (_, grads) = net.loss_and_grads(batch, labels).unwrap();
    let mut worst = 0.0f64;
    for name in net.trainable_names() {
        let a = grads.get(&name).unwrap();
        let n = a.numel();
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = net.clone();
            plus.param_mut(&name).unwrap().value.data_mut()[j] += h;
            let mut minus = net.clone();
            minus.param_mut(&name).unwrap().value.data_mut()[j] -= h;
            let lp = plus.loss_and_grads(batch, labels).unwrap().0;
            let lm = minus.loss_and_grads(batch, labels).unwrap().0;
            *slot = (lp - lm) / (2.0 * h);
        }
        let diff = a.data().iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.norm().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

/// Checks per-example gradients against running each example alone.
pub fn loop_of_one_max_rel<N: Network>(net: &N, batch: &TokenBatch, labels: &[usize]) -> f64 {
    let (_, per) = net.per_example(batch, labels).unwrap();
    let mut worst = 0.0f64;
    for e in 0..batch.batch {
        let single = batch.select(&[e]).unwrap();
        let (_, g) = net.loss_and_grads(&single, &labels[e..e + 1]).unwrap();
        for (name, ge) in &g.grads {
            worst = worst.max(rel(&per.example(name, e).unwrap(), ge));
        }
    }
    worst
}
