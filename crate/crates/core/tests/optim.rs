mod common;

use std::collections::BTreeMap;

use common::*;
use dpft_core::autodiff::PerExampleGradients;
use dpft_core::optim::{
    check_complete, clip_per_example, per_example_norms, poisson_sample, privatize, DpConfig, DpOptimizer, GradMap,
    OptimConfig, Optimizer,
};
use dpft_core::param::{ParamAccess, ParamStore, Parameter};
use dpft_core::peft::{attach, PeftSpec};
use dpft_core::{rng, Error, Tensor};
use proptest::prelude::*;

/// Per-example gradients of two parameters, one row per example.
fn per_example(rows: &[Vec<f64>]) -> PerExampleGradients {
    let b = rows.len();
    let split = rows[0].len() / 2;
    let take = |lo: usize, hi: usize| {
        let data: Vec<f64> = rows.iter().flat_map(|r| r[lo..hi].to_vec()).collect();
        Tensor::new(vec![b, hi - lo], data).unwrap()
    };
    let mut grads = BTreeMap::new();
    grads.insert("a".to_string(), take(0, split));
    grads.insert("b".to_string(), take(split, rows[0].len()));
    PerExampleGradients { batch: b, grads }
}

fn example_vec(per: &PerExampleGradients, e: usize) -> Vec<f64> {
    per.grads.keys().flat_map(|n| per.example(n, e).unwrap().data().to_vec()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dp(c: f64, sigma: f64, b: usize, n: usize, lr: f64) -> DpConfig {
    let mut cfg = DpConfig::new(c, sigma, b, n, &OptimConfig::sgd(lr));
    cfg.seed = 9;
    cfg
}

#[test]
fn poisson_sampling_extremes() {
    let mut r = rng::stream(1, "t");
    for _ in 0..20 {
        assert!(poisson_sample(500, 0.0, &mut r).is_empty());
        assert_eq!(poisson_sample(500, 1.0, &mut r), (0..500).collect::<Vec<_>>());
    }
}

#[test]
fn poisson_batch_size_statistics() {
    let mut r = rng::stream(2, "t");
    let (n, q, trials) = (10_000, 0.1, 1000);
    let sizes: Vec<f64> = (0..trials).map(|_| poisson_sample(n, q, &mut r).len() as f64).collect();
    let mean = sizes.iter().sum::<f64>() / trials as f64;
    let se = (n as f64 * q * (1.0 - q) / trials as f64).sqrt();
    assert!((mean - 1000.0).abs() < 3.0 * se, "mean {mean}, se {se}");
}

#[test]
fn clipping_examples() {
    let g5 = vec![3.0, 0.0, 4.0, 0.0];
    let g20 = vec![12.0, 0.0, 0.0, 16.0];
    let zero = vec![0.0; 4];
    let per = per_example(&[g5.clone(), g20.clone(), zero]);
    let clipped = clip_per_example(&per, 10.0).unwrap();
    assert_eq!(clipped.norms, vec![5.0, 20.0, 0.0]);
    assert_eq!(example_vec(&clipped.grads, 0), g5);
    let half: Vec<f64> = g20.iter().map(|x| x * 0.5).collect();
    assert_eq!(example_vec(&clipped.grads, 1), half);
    assert_eq!(norm(&example_vec(&clipped.grads, 1)), 10.0);
    assert_eq!(example_vec(&clipped.grads, 2), vec![0.0; 4]);
    assert!((clipped.clipped_fraction(10.0) - 1.0 / 3.0).abs() < 1e-15);
    assert!(matches!(clip_per_example(&per, 0.0), Err(Error::Config { .. })));
}

#[test]
fn missing_per_example_buffer_is_a_state_error() {
    let per = per_example(&[vec![1.0, 2.0]]);
    let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
    assert!(matches!(check_complete(&per, &names), Err(Error::State(_))));
    assert!(check_complete(&per, &names[..2]).is_ok());
}

#[test]
fn noise_statistics() {
    let sum: GradMap = [("g".to_string(), Tensor::from_vec(vec![0.0]))].into_iter().collect();
    let mut r = rng::stream(3, "noise");
    let trials = 10_000;
    let xs: Vec<f64> = (0..trials).map(|_| privatize(&sum, 1.0, 1.0, 1, &mut r)["g"].item()).collect();
    let mean = xs.iter().sum::<f64>() / trials as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    assert!(mean.abs() < 3.0 / (trials as f64).sqrt(), "mean {mean}");
    assert!((var - 1.0).abs() < 0.05, "variance {var}");
}

#[test]
fn privatized_gradient_is_unbiased() {
    // Non-zero clipped sum, σ·C/B = 2·3/4.
    let sum: GradMap = [("g".to_string(), Tensor::from_vec(vec![1.0, -2.0, 0.5]))].into_iter().collect();
    let (c, sigma, b) = (3.0, 2.0, 4);
    let mut r = rng::stream(4, "noise");
    let trials = 10_000;
    let mut acc = [0.0; 3];
    for _ in 0..trials {
        for (a, x) in acc.iter_mut().zip(privatize(&sum, c, sigma, b, &mut r)["g"].data()) {
            *a += x;
        }
    }
    let sd = sigma * c / b as f64 / (trials as f64).sqrt();
    for (a, want) in acc.iter().zip([0.25, -0.5, 0.125]) {
        assert!((a / trials as f64 - want).abs() < 3.0 * sd);
    }
}

#[test]
fn zero_noise_gives_the_clipped_mean_over_expected_batch() {
    let sum: GradMap = [("g".to_string(), Tensor::from_vec(vec![4.0, 8.0]))].into_iter().collect();
    let out = privatize(&sum, 1.0, 0.0, 4, &mut rng::stream(0, "x"));
    assert_eq!(out["g"].data(), &[1.0, 2.0]);
}

#[test]
fn noise_is_reproducible() {
    let sum: GradMap = [("g".to_string(), Tensor::zeros(&[50]))].into_iter().collect();
    let a = privatize(&sum, 1.0, 1.0, 1, &mut rng::stream(7, "n"));
    let b = privatize(&sum, 1.0, 1.0, 1, &mut rng::stream(7, "n"));
    let c = privatize(&sum, 1.0, 1.0, 1, &mut rng::stream(8, "n"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let c = small_config(5);
    let mut m = spread_model(&c);
    let before = m.clone();
    let (data, labels) = random_batch(1, &c, 20, 4);
    let mut opt = DpOptimizer::new(dp(1.0, 1.0, 5, 20, 0.0)).unwrap();
    for _ in 0..3 {
        opt.step(&mut m, &data, &labels).unwrap();
    }
    assert_eq!(m, before);
    assert_eq!(opt.steps(), 3);
}

#[test]
fn empty_sample_still_steps_on_noise() {
    let c = small_config(5);
    let (data, labels) = random_batch(1, &c, 4, 3);
    // q = 1/4: find a seed whose first draw is empty.
    let mut cfg = dp(1.0, 1.0, 1, 4, 0.1);
    cfg.seed = (0..)
        .find(|&s| {
            let mut probe = cfg.clone();
            probe.seed = s;
            DpOptimizer::new(probe).unwrap().sample().is_empty()
        })
        .unwrap();
    let mut m = spread_model(&c);
    let before = m.clone();
    let mut opt = DpOptimizer::new(cfg).unwrap();
    let stats = opt.step(&mut m, &data, &labels).unwrap();
    assert_eq!(stats.batch_size, 0);
    assert!(stats.mean_loss.is_nan());
    assert_eq!(opt.steps(), 1);
    assert_ne!(m, before);
    assert!(m.params.iter().all(|p| p.value.data().iter().all(|x| x.is_finite())));
}

#[test]
fn data_size_must_match_the_config() {
    let c = small_config(5);
    let mut m = spread_model(&c);
    let (data, labels) = random_batch(1, &c, 4, 3);
    let mut opt = DpOptimizer::new(dp(1.0, 1.0, 1, 5, 0.1)).unwrap();
    assert!(matches!(opt.step(&mut m, &data, &labels), Err(Error::Config { .. })));
}

#[test]
fn frozen_parameters_are_untouched_by_private_steps() {
    let c = small_config(6);
    for spec in [PeftSpec::lora(2), PeftSpec::adapter(4), PeftSpec::compacter(4, 2, 1)] {
        let mut pm = attach(spread_model(&c), &spec, 1).unwrap();
        let base = pm.base.clone();
        let theta = pm.theta.clone();
        let (data, labels) = random_batch(2, &c, 12, 4);
        let mut opt = DpOptimizer::new(dp(1.0, 0.8, 4, 12, 0.05)).unwrap();
        for _ in 0..4 {
            opt.step(&mut pm, &data, &labels).unwrap();
        }
        for p in base.params.iter() {
            let now = &pm.base.params.get(&p.name).unwrap().value;
            if p.trainable {
                assert_ne!(now, &p.value, "{}", p.name);
            } else {
                assert_eq!(now, &p.value, "{}", p.name);
            }
        }
        assert_ne!(pm.theta, theta);
    }
}

#[test]
fn optimizer_reports_shape_mismatch_by_name() {
    let mut s = ParamStore::new();
    s.insert(Parameter::new("w", Tensor::zeros(&[2, 2]), true)).unwrap();
    let g: GradMap = [("w".to_string(), Tensor::zeros(&[3]))].into_iter().collect();
    let mut opt = Optimizer::new(OptimConfig::adamw(0.1, 0.0)).unwrap();
    match opt.apply(&mut s, &g) {
        Err(Error::ParamShape { name, .. }) => assert_eq!(name, "w"),
        e => panic!("{e:?}"),
    }
}

#[test]
fn invalid_dp_configs_are_rejected() {
    assert!(DpOptimizer::new(dp(1.0, 0.0, 4, 10, 0.1)).is_err());
    let mut ok = dp(1.0, 0.0, 4, 10, 0.1);
    ok.non_private = true;
    assert!(DpOptimizer::new(ok).is_ok());
    assert!(DpOptimizer::new(dp(1.0, 1.0, 11, 10, 0.1)).is_err());
    assert!(DpOptimizer::new(dp(-1.0, 1.0, 4, 10, 0.1)).is_err());
    assert!(DpOptimizer::new(dp(1.0, 1.0, 0, 10, 0.1)).is_err());
    assert_eq!(dp(1.0, 1.0, 4, 10, 0.1).steps_per_epoch(), 3);
}

#[test]
fn same_seed_gives_the_same_trajectory() {
    let c = small_config(8);
    let (data, labels) = random_batch(3, &c, 10, 4);
    let run = || {
        let mut m = spread_model(&c);
        let mut opt = DpOptimizer::new(dp(1.0, 1.0, 3, 10, 0.05)).unwrap();
        for _ in 0..3 {
            opt.step(&mut m, &data, &labels).unwrap();
        }
        m
    };
    assert_eq!(run(), run());
}

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn clipped_norm_never_exceeds_the_bound(
        rows in prop::collection::vec(vec_strategy(6), 1..6),
        c in 0.01f64..20.0,
    ) {
        let clipped = clip_per_example(&per_example(&rows), c).unwrap();
        for e in 0..rows.len() {
            prop_assert!(norm(&example_vec(&clipped.grads, e)) <= c);
        }
        let recomputed = per_example_norms(&per_example(&rows));
        prop_assert_eq!(recomputed, clipped.norms);
    }

    #[test]
    fn clipping_preserves_direction(g in vec_strategy(6), c in 0.01f64..5.0) {
        let n = norm(&g);
        prop_assume!(n > c);
        let out = example_vec(&clip_per_example(&per_example(std::slice::from_ref(&g)), c).unwrap().grads, 0);
        let dot: f64 = out.iter().zip(&g).map(|(x, y)| x * y).sum();
        // Positive multiple: cosine one, and positive.
        prop_assert!(dot > 0.0);
        prop_assert!((dot / (norm(&out) * n) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_has_a_scale_ceiling(g in vec_strategy(6), lambda in 1.0f64..100.0, c in 0.01f64..5.0) {
        prop_assume!(norm(&g) >= c);
        let scaled: Vec<f64> = g.iter().map(|x| x * lambda).collect();
        let a = example_vec(&clip_per_example(&per_example(&[g]), c).unwrap().grads, 0);
        let b = example_vec(&clip_per_example(&per_example(&[scaled]), c).unwrap().grads, 0);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * c);
        }
    }

    #[test]
    fn one_extra_example_moves_the_sum_by_at_most_c(
        rows in prop::collection::vec(vec_strategy(4), 1..6),
        extra in vec_strategy(4),
        c in 0.01f64..20.0,
    ) {
        let small = clip_per_example(&per_example(&rows), c).unwrap().sum();
        let mut more = rows.clone();
        more.push(extra);
        let big = clip_per_example(&per_example(&more), c).unwrap().sum();
        let diff: f64 = small
            .iter()
            .map(|(k, v)| v.data().iter().zip(big[k].data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        prop_assert!(diff <= c * (1.0 + 1e-12));
    }
}

#[test]
fn dp_step_on_a_peft_model_only_needs_theta_buffers() {
    let c = small_config(3);
    let mut pm = attach(spread_model(&c), &PeftSpec::lora(2), 0).unwrap();
    let (data, labels) = random_batch(5, &c, 6, 3);
    let mut opt = DpOptimizer::new(dp(1.0, 1.0, 6, 6, 0.1)).unwrap();
    let stats = opt.step(&mut pm, &data, &labels).unwrap();
    assert_eq!(stats.batch_size, 6);
    assert!(pm.trainable_names().iter().all(|n| n.starts_with("lora.")));
}
