//! Reparametrized gradient perturbation, simplified.
//!
//! Each step writes every target matrix as `W = L·R + W̃` with `L` holding
//! orthonormal columns from a warm-started subspace iteration on `W` and
//! `R = Lᵀ·W`. Per-example gradients are taken for `L` and `R` only, mapped
//! to two low-dimensional carriers, clipped jointly, noised, and projected
//! back to a full-size update of `W`.
//!
//! With `Rᵀ = Q·T` (thin QR), the carriers are `c_R = ∇R = Lᵀ·G` and
//! `c_L = (I − L·Lᵀ)·∇L·T⁻¹ = (I − L·Lᵀ)·G·Q`, where `G` is the gradient
//! with respect to `W`. The update `L·c_R + c_L·Qᵀ` is the projection of
//! `G` onto the matrices of the form `L·X + Y·Qᵀ`, and the two terms are
//! orthogonal, so the joint carrier norm equals the norm of that update.
//! At full rank the projection is the identity and a step equals plain
//! clipped DP-SGD.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::autodiff::{PerExampleGradients, Var};
use crate::error::{config_err, Error, Result};
use crate::model::{matrix_name, transformer_forward, Forward, Hooks, Model, ModelConfig, TokenBatch, BLOCK_MATRICES};
use crate::ops::{mm, mm_at, mm_bt};
use crate::optim::{check_complete, clip_per_example, DpOptimizer, GradMap};
use crate::param::{ParamAccess, ParamStore, Parameter};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_POWER_ITERS: usize = 4;

/// `LR + W̃ = W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub l: Tensor,
    pub r: Tensor,
    pub residual: Tensor,
}

fn dims2(w: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *w.shape() {
        [a, b] => Ok((a, b)),
        _ => Err(Error::Shape { op, left: w.shape().to_vec(), right: vec![] }),
    }
}

/// Thin QR of a `rows×cols` matrix by modified Gram–Schmidt with one
/// re-orthogonalization pass. A column that is numerically dependent on the
/// previous ones gets a zero diagonal in `T` and an arbitrary orthonormal
/// completion in `Q`.
pub(crate) fn thin_qr(m: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut q = vec![0.0; rows * cols];
    let mut t = vec![0.0; cols * cols];
    let scale = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(f64::MIN_POSITIVE);
    let col = |q: &[f64], j: usize| (0..rows).map(|i| q[i * cols + j]).collect::<Vec<f64>>();
    for j in 0..cols {
        let mut v: Vec<f64> = (0..rows).map(|i| m[i * cols + j]).collect();
        for _ in 0..2 {
            for p in 0..j {
                let qp = col(&q, p);
                let dot: f64 = qp.iter().zip(&v).map(|(a, b)| a * b).sum();
                t[p * cols + j] += dot;
                for (vi, qi) in v.iter_mut().zip(&qp) {
                    *vi -= dot * qi;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 * scale * (rows as f64).sqrt() {
            t[j * cols + j] = norm;
            for (i, vi) in v.iter().enumerate() {
                q[i * cols + j] = vi / norm;
            }
            continue;
        }
        // Dependent column: complete Q with a basis vector orthogonal to the
        // columns so far.
        t[j * cols + j] = 0.0;
        for e in 0..rows {
            let mut u = vec![0.0; rows];
            u[e] = 1.0;
            for _ in 0..2 {
                for p in 0..j {
                    let qp = col(&q, p);
                    let dot: f64 = qp.iter().zip(&u).map(|(a, b)| a * b).sum();
                    for (ui, qi) in u.iter_mut().zip(&qp) {
                        *ui -= dot * qi;
                    }
                }
            }
            let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.5 {
                for (i, ui) in u.iter().enumerate() {
                    q[i * cols + j] = ui / n;
                }
                break;
            }
        }
    }
    (q, t)
}

/// Rank-`r` factorization of `w` by subspace iteration on `W·Wᵀ`, started
/// from `warm` (an `a×r` matrix) when given.
pub fn decompose(w: &Tensor, r: usize, warm: Option<&Tensor>, iters: usize) -> Result<Decomposition> {
    let (a, b) = dims2(w, "decompose")?;
    if r == 0 || r > a.min(b) {
        return Err(config_err("rank", format!("must lie in [1, {}] for a {a}x{b} matrix", a.min(b))));
    }
    let mut l = match warm {
        Some(t) if t.shape() == [a, r] => t.data().to_vec(),
        Some(t) => return Err(Error::Shape { op: "decompose", left: t.shape().to_vec(), right: vec![a, r] }),
        None => {
            let mut g = rng::stream(a as u64 * 1_000_003 + b as u64, "rgp/start");
            rng::normal_vec(&mut g, a * r, 1.0)
        }
    };
    l = thin_qr(&l, a, r).0;
    for _ in 0..iters {
        let wt_l = mm_at(w.data(), &l, a, b, r);
        let y = mm(w.data(), &wt_l, a, b, r);
        l = thin_qr(&y, a, r).0;
    }
    let rr = mm_at(&l, w.data(), a, r, b);
    let lr = mm(&l, &rr, a, r, b);
    let residual: Vec<f64> = w.data().iter().zip(&lr).map(|(x, y)| x - y).collect();
    Ok(Decomposition {
        l: Tensor::new(vec![a, r], l)?,
        r: Tensor::new(vec![r, b], rr)?,
        residual: Tensor::new(vec![a, b], residual)?,
    })
}

/// Largest singular value by power iteration on `WᵀW`.
pub fn spectral_norm(w: &Tensor) -> Result<f64> {
    let (a, b) = dims2(w, "spectral_norm")?;
    let mut g = rng::stream(0, "stable_rank/start");
    let mut v = rng::normal_vec(&mut g, b, 1.0);
    let mut lambda = 0.0;
    for _ in 0..1_000_000 {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Ok(0.0);
        }
        v.iter_mut().for_each(|x| *x /= n);
        let wv = mm(w.data(), &v, a, b, 1);
        let next = wv.iter().map(|x| x * x).sum::<f64>();
        v = mm_at(w.data(), &wv, a, b, 1);
        let done = (next - lambda).abs() <= 1e-14 * next;
        lambda = next;
        if done {
            break;
        }
    }
    Ok(lambda.sqrt())
}

/// `‖W‖_F² / ‖W‖₂²`.
pub fn stable_rank(w: &Tensor) -> Result<f64> {
    dims2(w, "stable_rank")?;
    let fro = w.norm_sq();
    if fro == 0.0 {
        return Err(Error::Undefined("stable rank of a zero matrix".into()));
    }
    let s = spectral_norm(w)?;
    Ok(fro / (s * s))
}

pub fn factor_names(target: &str) -> (String, String) {
    (format!("rgp.{target}.L"), format!("rgp.{target}.R"))
}

/// Applies each target as `x·W̃ + x·L·R`, with `W̃` a constant and the
/// factors bound from the factor store.
pub struct RgpHooks {
    residuals: BTreeMap<String, Tensor>,
}

impl RgpHooks {
    pub fn is_target(&self, weight: &str) -> bool {
        self.residuals.contains_key(weight)
    }
}

impl Hooks for RgpHooks {
    fn project(&self, f: &mut Forward<'_>, weight: &str, x: Var) -> Result<Var> {
        let Some(res) = self.residuals.get(weight) else {
            return f.linear(weight, x);
        };
        let c = f.tape.constant(res.clone())?;
        let y = f.tape.matmul(x, c)?;
        let (l, r) = factor_names(weight);
        let t = f.linear(&l, x)?;
        let t = f.linear(&r, t)?;
        f.tape.add(y, t)
    }
}

struct Carrier {
    l: Tensor,
    q: Vec<f64>,
    t: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RgpStepStats {
    pub batch_size: usize,
    pub mean_loss: f64,
    pub clipped_fraction: f64,
}

/// Per-run RGP bookkeeping.
#[derive(Debug, Clone)]
pub struct RgpState {
    pub rank: usize,
    pub power_iters: usize,
    pub targets: Vec<String>,
    warm: BTreeMap<String, Tensor>,
    initial: BTreeMap<String, Tensor>,
    /// `W_t − W_0` per target.
    pub accumulated: BTreeMap<String, Tensor>,
    /// Change applied to each target by the most recent step.
    pub last_update: BTreeMap<String, Tensor>,
}

impl RgpState {
    pub fn new<P: ParamAccess + ?Sized>(params: &P, targets: &[String], rank: usize) -> Result<Self> {
        let mut initial = BTreeMap::new();
        for name in targets {
            let p = params.param(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            let (a, b) = dims2(&p.value, "rgp")?;
            if rank == 0 || rank > a.min(b) {
                return Err(config_err("rank", format!("must lie in [1, {}] for {name}", a.min(b))));
            }
            initial.insert(name.clone(), p.value.clone());
        }
        Ok(RgpState {
            rank,
            power_iters: DEFAULT_POWER_ITERS,
            targets: targets.to_vec(),
            warm: BTreeMap::new(),
            accumulated: initial.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
            initial,
            last_update: BTreeMap::new(),
        })
    }

    pub fn initial(&self, name: &str) -> Option<&Tensor> {
        self.initial.get(name)
    }
}

/// Solves `X·T = G` for `X` with `T` upper triangular (`r×r`), zeroing the
/// columns whose pivot vanished.
fn solve_upper_right(g: &[f64], t: &[f64], rows: usize, r: usize) -> Vec<f64> {
    let tmax = t.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut x = vec![0.0; rows * r];
    for i in 0..rows {
        for j in 0..r {
            let pivot = t[j * r + j];
            if pivot.abs() <= 1e-12 * tmax {
                continue;
            }
            let mut acc = g[i * r + j];
            for p in 0..j {
                acc -= x[i * r + p] * t[p * r + j];
            }
            x[i * r + j] = acc / pivot;
        }
    }
    x
}

/// One RGP step.
///
/// `run` evaluates the model with the supplied hooks and factor store on
/// the step's batch and returns per-example losses and gradients, or `None`
/// when the Poisson sample is empty (the step then applies pure noise).
pub fn rgp_step<P, F>(params: &mut P, state: &mut RgpState, dp: &mut DpOptimizer, run: F) -> Result<RgpStepStats>
where
    P: ParamAccess + ?Sized,
    F: FnOnce(&P, &RgpHooks, &ParamStore) -> Result<Option<(Vec<f64>, PerExampleGradients)>>,
{
    let mut factors = ParamStore::new();
    let mut residuals = BTreeMap::new();
    let mut carriers = BTreeMap::new();
    for name in &state.targets {
        let w = &params.param(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?.value;
        let d = decompose(w, state.rank, state.warm.get(name), state.power_iters)?;
        let b = w.shape()[1];
        let rt = d.r.transpose()?;
        let (q, t) = thin_qr(rt.data(), b, state.rank);
        let (ln, rn) = factor_names(name);
        factors.insert(Parameter::new(ln, d.l.clone(), true))?;
        factors.insert(Parameter::new(rn, d.r, true))?;
        residuals.insert(name.clone(), d.residual);
        state.warm.insert(name.clone(), d.l.clone());
        carriers.insert(name.clone(), Carrier { l: d.l, q, t });
    }
    let hooks = RgpHooks { residuals };
    let outcome = run(params, &hooks, &factors)?;
    let r = state.rank;

    let (carrier_sum, batch_size, mean_loss, clipped_fraction) = match outcome {
        Some((losses, per)) => {
            check_complete(&per, &factors.names())?;
            let bsz = per.batch;
            let mut mapped = BTreeMap::new();
            for (name, c) in &carriers {
                let (a, b) = (c.l.shape()[0], c.q.len() / r);
                let (ln, rn) = factor_names(name);
                let gl = &per.grads[&ln];
                let gr = &per.grads[&rn];
                let mut cl_all = Vec::with_capacity(bsz * a * r);
                for e in 0..bsz {
                    let gl_e = &gl.data()[e * a * r..(e + 1) * a * r];
                    let x = solve_upper_right(gl_e, &c.t, a, r);
                    // (I − L·Lᵀ)·x
                    let ltx = mm_at(c.l.data(), &x, a, r, r);
                    let llx = mm(c.l.data(), &ltx, a, r, r);
                    cl_all.extend(x.iter().zip(&llx).map(|(u, v)| u - v));
                }
                mapped.insert(format!("{name}.carrier_l"), Tensor::new(vec![bsz, a, r], cl_all)?);
                mapped.insert(format!("{name}.carrier_r"), Tensor::new(vec![bsz, r, b], gr.data().to_vec())?);
            }
            let per_carrier = PerExampleGradients { batch: bsz, grads: mapped };
            let clipped = clip_per_example(&per_carrier, dp.config.clip_norm)?;
            let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
            (clipped.sum(), bsz, mean, clipped.clipped_fraction(dp.config.clip_norm))
        }
        None => {
            let mut zeros = GradMap::new();
            for (name, c) in &carriers {
                let (a, b) = (c.l.shape()[0], c.q.len() / r);
                zeros.insert(format!("{name}.carrier_l"), Tensor::zeros(&[a, r]));
                zeros.insert(format!("{name}.carrier_r"), Tensor::zeros(&[r, b]));
            }
            (zeros, 0, f64::NAN, 0.0)
        }
    };
    let noisy = dp.privatize(&carrier_sum);

    let mut updates = GradMap::new();
    for (name, c) in &carriers {
        let (a, b) = (c.l.shape()[0], c.q.len() / r);
        let cl = &noisy[&format!("{name}.carrier_l")];
        let cr = &noisy[&format!("{name}.carrier_r")];
        let mut g = mm(c.l.data(), cr.data(), a, r, b);
        let second = mm_bt(cl.data(), &c.q, a, r, b);
        for (x, y) in g.iter_mut().zip(&second) {
            *x += y;
        }
        updates.insert(name.clone(), Tensor::new(vec![a, b], g)?);
    }
    let before: BTreeMap<String, Tensor> =
        state.targets.iter().map(|n| (n.clone(), params.param(n).expect("target exists").value.clone())).collect();
    dp.optimizer.apply(params, &updates)?;
    state.last_update.clear();
    for (name, w0) in before {
        let w1 = &params.param(&name).expect("target exists").value;
        let delta = Tensor::new(w0.shape().to_vec(), w1.data().iter().zip(w0.data()).map(|(x, y)| x - y).collect())?;
        state.accumulated.get_mut(&name).expect("tracked target").add_assign(&delta)?;
        state.last_update.insert(name, delta);
    }
    Ok(RgpStepStats { batch_size, mean_loss, clipped_fraction })
}

/// Every block matrix of the model, in layer order.
pub fn default_targets(config: &ModelConfig) -> Vec<String> {
    (0..config.n_layers).flat_map(|i| BLOCK_MATRICES.iter().map(move |w| matrix_name(i, w))).collect()
}

/// Freezes everything except `targets`, which RGP updates directly.
pub fn prepare_model(model: &mut Model, targets: &[String]) -> Result<()> {
    model.freeze("*")?;
    for t in targets {
        model.unfreeze(t)?;
    }
    Ok(())
}

/// One RGP step of a transformer on a Poisson sample of `data`.
pub fn rgp_model_step(
    model: &mut Model,
    state: &mut RgpState,
    dp: &mut DpOptimizer,
    data: &TokenBatch,
    labels: &[usize],
) -> Result<RgpStepStats> {
    if data.batch != dp.config.dataset_size {
        return Err(config_err(
            "dataset_size",
            format!("configured {} but the data holds {}", dp.config.dataset_size, data.batch),
        ));
    }
    let idx = dp.sample();
    if idx.is_empty() {
        return rgp_batch_step(model, state, dp, None);
    }
    let batch = data.select(&idx)?;
    let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    rgp_batch_step(model, state, dp, Some((&batch, &batch_labels)))
}

/// One RGP step of a transformer on an explicit batch (`None` applies a
/// pure-noise step).
pub fn rgp_batch_step(
    model: &mut Model,
    state: &mut RgpState,
    dp: &mut DpOptimizer,
    batch: Option<(&TokenBatch, &[usize])>,
) -> Result<RgpStepStats> {
    if let Some(extra) = model.trainable_names().into_iter().find(|n| !state.targets.contains(n)) {
        return Err(Error::State(format!("`{extra}` is trainable but not an RGP target")));
    }
    rgp_step(model, state, dp, |m: &Model, hooks, factors| {
        let Some((batch, labels)) = batch else {
            return Ok(None);
        };
        let (mut f, logits) = transformer_forward(&m.config, vec![&m.params, factors], hooks, batch)?;
        let losses = f.tape.cross_entropy_per_example(logits, labels)?;
        let per = f.tape.per_example_backward(losses)?;
        Ok(Some((f.value(losses).data().to_vec(), per)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qr_reconstructs() {
        let m = vec![1.0, 2.0, 3.0, 4.0, 5.0, 7.0];
        let (q, t) = thin_qr(&m, 3, 2);
        let back = mm(&q, &t, 3, 2, 2);
        for (x, y) in back.iter().zip(&m) {
            assert!((x - y).abs() < 1e-12);
        }
        let qtq = mm_at(&q, &q, 3, 2, 2);
        assert!((qtq[0] - 1.0).abs() < 1e-12 && qtq[1].abs() < 1e-12 && (qtq[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dependent_column_completed() {
        let m = vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0];
        let (q, t) = thin_qr(&m, 3, 2);
        assert_eq!(t[3], 0.0);
        let qtq = mm_at(&q, &q, 3, 2, 2);
        assert!((qtq[3] - 1.0).abs() < 1e-12 && qtq[1].abs() < 1e-12);
    }

    #[test]
    fn triangular_solve() {
        let t = vec![2.0, 1.0, 0.0, 4.0];
        let x = vec![1.0, -1.0, 0.5, 3.0];
        let g = mm(&x, &t, 2, 2, 2);
        let back = solve_upper_right(&g, &t, 2, 2);
        for (u, v) in back.iter().zip(&x) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_matrix_is_undefined() {
        assert!(matches!(stable_rank(&Tensor::zeros(&[3, 3])), Err(Error::Undefined(_))));
    }
}
