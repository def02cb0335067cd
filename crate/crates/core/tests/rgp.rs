mod common;

use std::cell::RefCell;

use common::*;
use dpft_core::model::{Forward, Hooks};
use dpft_core::optim::{clip_per_example, DpConfig, DpOptimizer, OptimConfig};
use dpft_core::param::{ParamStore, Parameter};
use dpft_core::rgp::{
    decompose, default_targets, factor_names, prepare_model, rgp_model_step, rgp_step, spectral_norm, stable_rank,
    RgpState,
};
use dpft_core::{rng, DType, Error, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn gaussian(seed: u64, a: usize, b: usize) -> Tensor {
    let mut r = rng::stream(seed, "matrix");
    Tensor::new(vec![a, b], rng::normal_vec(&mut r, a * b, 1.0)).unwrap()
}

fn to_na(t: &Tensor) -> DMatrix<f64> {
    let s = t.shape();
    DMatrix::from_row_slice(s[0], s[1], t.data())
}

fn svd_stable_rank(t: &Tensor) -> f64 {
    let sv = to_na(t).singular_values();
    let top = sv.max();
    sv.iter().map(|s| s * s).sum::<f64>() / (top * top)
}

fn fro(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

#[test]
fn rank_one_matrix_is_recovered_exactly() {
    let u = DMatrix::from_fn(7, 1, |i, _| (i as f64 + 1.0).sin());
    let v = DMatrix::from_fn(1, 5, |_, j| (j as f64 * 0.7).cos() + 0.2);
    let w = u * v;
    let t = Tensor::new(vec![7, 5], w.transpose().as_slice().to_vec()).unwrap();
    let d = decompose(&t, 1, None, 4).unwrap();
    let lr = to_na(&d.l) * to_na(&d.r);
    assert!(fro(&(lr - to_na(&t))) < 1e-10);
}

#[test]
fn subspace_iteration_nearly_matches_the_svd_optimum() {
    for seed in 0..5 {
        let w = gaussian(seed, 16, 16);
        let d = decompose(&w, 4, None, 50).unwrap();
        let got = fro(&to_na(&d.residual));
        let sv = to_na(&w).singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let optimal = s[4..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(got <= optimal * 1.01, "seed {seed}: {got} vs optimal {optimal}");
    }
}

#[test]
fn factors_and_residual_reconstruct_the_matrix() {
    for (a, b, r) in [(16, 16, 4), (8, 20, 3), (20, 8, 8)] {
        let w = gaussian(a as u64 * b as u64, a, b);
        let d = decompose(&w, r, None, 4).unwrap();
        assert_eq!(d.l.shape(), &[a, r]);
        assert_eq!(d.r.shape(), &[r, b]);
        let back = to_na(&d.l) * to_na(&d.r) + to_na(&d.residual);
        assert!((back - to_na(&w)).amax() < 1e-12);
        let ltl = to_na(&d.l).transpose() * to_na(&d.l);
        assert!((ltl - DMatrix::identity(r, r)).amax() < 1e-12);
    }
}

#[test]
fn warm_start_shape_and_rank_are_checked() {
    let w = gaussian(1, 6, 5);
    assert!(matches!(decompose(&w, 0, None, 4), Err(Error::Config { .. })));
    assert!(matches!(decompose(&w, 6, None, 4), Err(Error::Config { .. })));
    assert!(matches!(decompose(&w, 2, Some(&Tensor::zeros(&[5, 2])), 4), Err(Error::Shape { .. })));
    let first = decompose(&w, 2, None, 30).unwrap();
    let warm = decompose(&w, 2, Some(&first.l), 1).unwrap();
    assert!(fro(&to_na(&warm.residual)) <= fro(&to_na(&first.residual)) * (1.0 + 1e-9));
}

#[test]
fn stable_rank_examples() {
    let u = gaussian(2, 9, 1);
    let v = gaussian(3, 1, 6);
    let rank_one = Tensor::new(vec![9, 6], (to_na(&u) * to_na(&v)).transpose().as_slice().to_vec()).unwrap();
    assert!((stable_rank(&rank_one).unwrap() - 1.0).abs() < 1e-6);
    for n in [1, 5, 12] {
        let id = Tensor::new(vec![n, n], DMatrix::<f64>::identity(n, n).as_slice().to_vec()).unwrap();
        assert!((stable_rank(&id).unwrap() - n as f64).abs() < 1e-6);
    }
    let g = gaussian(4, 32, 32);
    assert!((stable_rank(&g).unwrap() - svd_stable_rank(&g)).abs() < 1e-6);
    assert!(matches!(stable_rank(&Tensor::zeros(&[3, 3])), Err(Error::Undefined(_))));
}

#[test]
fn spectral_norm_matches_svd() {
    for seed in 0..5 {
        let g = gaussian(seed + 10, 12, 20);
        let want = to_na(&g).singular_values().max();
        assert!((spectral_norm(&g).unwrap() - want).abs() < 1e-9 * want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stable_rank_lies_between_one_and_rank(a in 1usize..10, b in 1usize..10, k in 1usize..5, seed in 0u64..1000) {
        // Product of a×k and k×b has rank at most k.
        let k = k.min(a).min(b);
        let m = to_na(&gaussian(seed, a, k)) * to_na(&gaussian(seed + 1, k, b));
        let t = Tensor::new(vec![a, b], m.transpose().as_slice().to_vec()).unwrap();
        let sr = stable_rank(&t).unwrap();
        prop_assert!(sr >= 1.0 - 1e-9);
        prop_assert!(sr <= k as f64 + 1e-9);
    }
}

/// Linear classifier `logits = x·W` driven through the RGP hooks.
struct Linear {
    x: Tensor,
    labels: Vec<usize>,
}

impl Linear {
    fn new(seed: u64, n: usize, a: usize, b: usize) -> Self {
        let mut r = rng::stream(seed, "linear");
        let x = Tensor::new(vec![n, a], (0..n * a).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let labels = (0..n).map(|_| r.random_range(0..b)).collect();
        Linear { x, labels }
    }

    fn run(
        &self,
        params: &ParamStore,
        hooks: &dyn Hooks,
        factors: &ParamStore,
    ) -> dpft_core::Result<(Vec<f64>, dpft_core::PerExampleGradients)> {
        let mut f = Forward::new(vec![params, factors], DType::F64);
        let x = f.tape.input(self.x.clone())?;
        let y = hooks.project(&mut f, "w", x)?;
        let losses = f.tape.cross_entropy_per_example(y, &self.labels)?;
        let per = f.tape.per_example_backward(losses)?;
        Ok((f.value(losses).data().to_vec(), per))
    }
}

struct Plain;
impl Hooks for Plain {}

fn store(w: Tensor) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(Parameter::new("w", w, true)).unwrap();
    s
}

fn exact_dp(n: usize, c: f64, sigma: f64, lr: f64, seed: u64) -> DpConfig {
    let mut cfg = DpConfig::new(c, sigma, n, n, &OptimConfig::sgd(lr));
    cfg.non_private = sigma == 0.0;
    cfg.seed = seed;
    cfg
}

#[test]
fn full_rank_noiseless_rgp_is_clipped_sgd() {
    for (a, b) in [(3, 5), (5, 3), (4, 4)] {
        let n = 6;
        let lin = Linear::new(a as u64 * 10 + b as u64, n, a, b);
        let w0 = gaussian(7, a, b);
        let (c, lr) = (0.3, 0.7);

        // Plain clipped SGD oracle.
        let mut plain = store(w0.clone());
        let (_, per) = lin.run(&plain, &Plain, &ParamStore::new()).unwrap();
        let clipped = clip_per_example(&per, c).unwrap();
        assert!(clipped.clipped_fraction(c) > 0.0);
        let g = &clipped.sum()["w"];
        for (wi, gi) in plain.get_mut("w").unwrap().value.data_mut().iter_mut().zip(g.data()) {
            *wi -= lr * gi / n as f64;
        }

        let mut params = store(w0);
        let mut state = RgpState::new(&params, &["w".to_string()], a.min(b)).unwrap();
        let mut dp = DpOptimizer::new(exact_dp(n, c, 0.0, lr, 1)).unwrap();
        rgp_step(&mut params, &mut state, &mut dp, |p, hooks, factors| lin.run(p, hooks, factors).map(Some)).unwrap();
        let diff = max_abs(&params.get("w").unwrap().value, &plain.get("w").unwrap().value);
        assert!(diff < 1e-8, "{a}x{b}: {diff:e}");
    }
}

#[test]
fn accumulated_update_tracks_the_weights() {
    let (n, a, b) = (8, 6, 5);
    let lin = Linear::new(1, n, a, b);
    let mut params = store(gaussian(2, a, b));
    let w0 = params.get("w").unwrap().value.clone();
    let mut state = RgpState::new(&params, &["w".to_string()], 2).unwrap();
    let mut dp = DpOptimizer::new(exact_dp(n, 1.0, 1.0, 0.1, 3)).unwrap();
    for _ in 0..25 {
        rgp_step(&mut params, &mut state, &mut dp, |p, h, f| lin.run(p, h, f).map(Some)).unwrap();
    }
    let wt = &params.get("w").unwrap().value;
    let delta = to_na(wt) - to_na(&w0);
    assert!((delta - to_na(&state.accumulated["w"])).amax() < 1e-10);
    assert_eq!(state.initial("w"), Some(&w0));
}

#[test]
fn single_step_update_lies_in_the_carrier_span() {
    let (n, a, b, r) = (10, 12, 9, 3);
    let lin = Linear::new(4, n, a, b);
    let mut params = store(gaussian(5, a, b));
    let mut state = RgpState::new(&params, &["w".to_string()], r).unwrap();
    let mut dp = DpOptimizer::new(exact_dp(n, 1.0, 1.5, 0.2, 6)).unwrap();
    for _ in 0..3 {
        let seen = RefCell::new(None);
        rgp_step(&mut params, &mut state, &mut dp, |p, h, f| {
            let (l, rr) = factor_names("w");
            *seen.borrow_mut() = Some((f.value(&l).unwrap().clone(), f.value(&rr).unwrap().clone()));
            lin.run(p, h, f).map(Some)
        })
        .unwrap();
        let (l, rr) = seen.into_inner().unwrap();
        let l = to_na(&l);
        let q = to_na(&rr).transpose().qr().q();
        let dw = to_na(&state.last_update["w"]);
        let pl = DMatrix::identity(a, a) - &l * l.transpose();
        let pq = DMatrix::identity(b, b) - &q * q.transpose();
        let outside = &pl * &dw * &pq;
        assert!(outside.amax() < 1e-10, "{:e}", outside.amax());
        let sr = stable_rank(&state.last_update["w"]).unwrap();
        assert!(sr <= 2.0 * r as f64 + 0.01, "single-step stable rank {sr}");
    }
}

#[test]
fn rgp_rank_must_fit_every_target() {
    let params = store(gaussian(1, 4, 6));
    assert!(matches!(RgpState::new(&params, &["w".to_string()], 5), Err(Error::Config { .. })));
    assert!(matches!(RgpState::new(&params, &["v".to_string()], 1), Err(Error::UnknownParameter(_))));
}

#[test]
fn model_step_moves_only_targets() {
    let c = small_config(3);
    let mut m = spread_model(&c);
    let before = m.clone();
    let targets = default_targets(&c);
    assert_eq!(targets.len(), 6 * c.n_layers);
    let (data, labels) = random_batch(2, &c, 16, 4);
    let mut state = RgpState::new(&m, &targets, 2).unwrap();
    let mut dp = DpOptimizer::new(exact_dp(16, 1.0, 1.0, 0.1, 1)).unwrap();
    dp.config.expected_batch = 4;
    assert!(matches!(rgp_model_step(&mut m, &mut state, &mut dp, &data, &labels), Err(Error::State(_))));
    prepare_model(&mut m, &targets).unwrap();
    for _ in 0..3 {
        rgp_model_step(&mut m, &mut state, &mut dp, &data, &labels).unwrap();
    }
    for p in before.params.iter() {
        let now = &m.params.get(&p.name).unwrap().value;
        assert_eq!(targets.contains(&p.name), now != &p.value, "{}", p.name);
    }
}
