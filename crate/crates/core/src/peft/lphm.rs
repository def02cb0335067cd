//! Low-rank parameterized hypercomplex multiplication (LPHM) matrices.
//!
//! `M = Σᵢ Aᵢ ⊗ (Sᵢ Tᵢ)` with `Aᵢ ∈ ℝ^{n×n}`, `Sᵢ ∈ ℝ^{(a/n)×k}` and
//! `Tᵢ ∈ ℝ^{k×(b/n)}`, so `M ∈ ℝ^{a×b}`. Products with `M` are computed
//! block by block without forming it.

use crate::error::{config_err, Result};
use crate::ops::{mm, mm_at, mm_bt};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LphmMatrix {
    pub a: Vec<Tensor>,
    pub s: Vec<Tensor>,
    pub t: Vec<Tensor>,
}

/// Checks that an a×b LPHM with hypercomplex dimension n and rank k is
/// well formed.
pub fn check_dims(a: usize, b: usize, n: usize, k: usize) -> Result<()> {
    if n == 0 {
        return Err(config_err("n", "hypercomplex dimension must be positive"));
    }
    if k == 0 {
        return Err(config_err("k", "LPHM rank must be positive"));
    }
    if !a.is_multiple_of(n) {
        return Err(config_err("n", format!("input dimension {a} is not divisible by n={n}")));
    }
    if !b.is_multiple_of(n) {
        return Err(config_err("n", format!("output dimension {b} is not divisible by n={n}")));
    }
    Ok(())
}

impl LphmMatrix {
    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn rows(&self) -> usize {
        self.n() * self.s[0].shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.n() * self.t[0].shape()[1]
    }

    /// Dense `M`, for tests and export.
    pub fn materialize(&self) -> Tensor {
        let n = self.n();
        let (an, bn) = (self.rows() / n, self.cols() / n);
        let k = self.s[0].shape()[1];
        let cols = self.cols();
        let mut out = vec![0.0; self.rows() * cols];
        for i in 0..n {
            let block = mm(self.s[i].data(), self.t[i].data(), an, k, bn);
            for p in 0..n {
                for q in 0..n {
                    let w = self.a[i].data()[p * n + q];
                    for u in 0..an {
                        for v in 0..bn {
                            out[(p * an + u) * cols + q * bn + v] += w * block[u * bn + v];
                        }
                    }
                }
            }
        }
        Tensor::new(vec![self.rows(), cols], out).expect("consistent dims")
    }

    /// `M x` for `x ∈ ℝ^b`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let (an, bn) = (self.rows() / n, self.cols() / n);
        let k = self.s[0].shape()[1];
        assert_eq!(x.len(), self.cols(), "matvec input length");
        let mut y = vec![0.0; self.rows()];
        for i in 0..n {
            // X is [n, b/n]; (X Tᵢᵀ) Sᵢᵀ is [n, a/n].
            let xt = mm_bt(x, self.t[i].data(), n, bn, k);
            let xts = mm_bt(&xt, self.s[i].data(), n, k, an);
            for p in 0..n {
                for q in 0..n {
                    let w = self.a[i].data()[p * n + q];
                    for u in 0..an {
                        y[p * an + u] += w * xts[q * an + u];
                    }
                }
            }
        }
        y
    }

    /// `xᵀ M` for every row of `x[.., a]`.
    pub fn vecmat_rows(&self, x: &Tensor) -> Tensor {
        let a: Vec<&[f64]> = self.a.iter().map(|t| t.data()).collect();
        let s: Vec<&[f64]> = self.s.iter().map(|t| t.data()).collect();
        let t: Vec<&[f64]> = self.t.iter().map(|t| t.data()).collect();
        let dims = Dims::of(&self.s[0], &self.t[0], self.n());
        let out = rows_forward(x.data(), x.rows(), &dims, &a, &s, &t);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = self.cols();
        Tensor::new(shape, out).expect("consistent dims")
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims {
    pub n: usize,
    pub an: usize,
    pub bn: usize,
    pub k: usize,
}

impl Dims {
    pub(crate) fn of(s0: &Tensor, t0: &Tensor, n: usize) -> Dims {
        Dims { n, an: s0.shape()[0], bn: t0.shape()[1], k: s0.shape()[1] }
    }
}

/// Adds `Aᵢᵀ W` into `y` (both `[n, bn]`).
fn add_at_w(y: &mut [f64], a: &[f64], w: &[f64], n: usize, bn: usize) {
    for p in 0..n {
        for q in 0..n {
            let apq = a[p * n + q];
            for v in 0..bn {
                y[q * bn + v] += apq * w[p * bn + v];
            }
        }
    }
}

pub(crate) fn rows_forward(x: &[f64], rows: usize, d: &Dims, a: &[&[f64]], s: &[&[f64]], t: &[&[f64]]) -> Vec<f64> {
    let (in_dim, out_dim) = (d.n * d.an, d.n * d.bn);
    let mut out = vec![0.0; rows * out_dim];
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let yr = &mut out[r * out_dim..(r + 1) * out_dim];
        for i in 0..d.n {
            let z = mm(xr, s[i], d.n, d.an, d.k);
            let w = mm(&z, t[i], d.n, d.k, d.bn);
            add_at_w(yr, a[i], &w, d.n, d.bn);
        }
    }
    out
}

pub(crate) struct RowsGrad {
    pub x: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub t: Vec<Vec<f64>>,
}

pub(crate) fn rows_backward(
    x: &[f64],
    g: &[f64],
    rows: usize,
    d: &Dims,
    a: &[&[f64]],
    s: &[&[f64]],
    t: &[&[f64]],
) -> RowsGrad {
    let (in_dim, out_dim) = (d.n * d.an, d.n * d.bn);
    let mut grad = RowsGrad {
        x: vec![0.0; rows * in_dim],
        a: vec![vec![0.0; d.n * d.n]; d.n],
        s: vec![vec![0.0; d.an * d.k]; d.n],
        t: vec![vec![0.0; d.k * d.bn]; d.n],
    };
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let gr = &g[r * out_dim..(r + 1) * out_dim];
        for i in 0..d.n {
            let z = mm(xr, s[i], d.n, d.an, d.k);
            let w = mm(&z, t[i], d.n, d.k, d.bn);
            // y[q, :] += Σ_p A[p, q] w[p, :]
            let ga = mm_bt(&w, gr, d.n, d.bn, d.n);
            for (acc, v) in grad.a[i].iter_mut().zip(&ga) {
                *acc += v;
            }
            let gw = mm(a[i], gr, d.n, d.n, d.bn);
            let gt = mm_at(&z, &gw, d.n, d.k, d.bn);
            for (acc, v) in grad.t[i].iter_mut().zip(&gt) {
                *acc += v;
            }
            let gz = mm_bt(&gw, t[i], d.n, d.bn, d.k);
            let gs = mm_at(xr, &gz, d.n, d.an, d.k);
            for (acc, v) in grad.s[i].iter_mut().zip(&gs) {
                *acc += v;
            }
            let gx = mm_bt(&gz, s[i], d.n, d.k, d.an);
            for (acc, v) in grad.x[r * in_dim..(r + 1) * in_dim].iter_mut().zip(&gx) {
                *acc += v;
            }
        }
    }
    grad
}
