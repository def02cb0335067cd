//! Forward kernels shared by the plain tensor API and the tape.
//!
//! All reductions run left to right in a fixed order, and every row of a
//! batched input is computed independently of the others, so a batch and
//! its examples taken one at a time produce bit-identical rows.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn ensure_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { op })
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

/// c[m×n] = a[m×k] · b[k×n]
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let bp = &b[p * n..(p + 1) * n];
            for (cj, bj) in ci.iter_mut().zip(bp) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// c[m×k] = g[m×n] · b[k×n]ᵀ
pub(crate) fn mm_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let bp = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (x, y) in gi.iter().zip(bp) {
                acc += x * y;
            }
            c[i * k + p] = acc;
        }
    }
    c
}

/// c[k×n] = a[m×k]ᵀ · g[m×n]
pub(crate) fn mm_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let cp = &mut c[p * n..(p + 1) * n];
            for (cj, gj) in cp.iter_mut().zip(gi) {
                *cj += aip * gj;
            }
        }
    }
    c
}

/// `a[.., k] · b[k, n]`, contracting the last axis of `a`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure_finite(a, "matmul")?;
    ensure_finite(b, "matmul")?;
    if a.rank() < 1 || b.rank() != 2 || a.last_dim() != b.shape()[0] {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k, n) = (a.rows(), b.shape()[0], b.shape()[1]);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = n;
    Tensor::new(shape, mm(a.data(), b.data(), m, k, n))
}

/// Leading "group" axes shared by both operands of a batched product.
fn bmm_dims(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<(usize, usize, usize, usize)> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || ra != rb || a.shape()[..ra - 2] != b.shape()[..rb - 2] {
        return Err(shape_err("batch_matmul", a, b));
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (bk, n) =
        if transpose_b { (b.shape()[rb - 1], b.shape()[rb - 2]) } else { (b.shape()[rb - 2], b.shape()[rb - 1]) };
    if bk != k {
        return Err(shape_err("batch_matmul", a, b));
    }
    let groups = a.shape()[..ra - 2].iter().product();
    Ok((groups, m, k, n))
}

/// Per-group product over leading axes: `a[.., m, k] · b[.., k, n]`, or
/// `a · bᵀ` with `b[.., n, k]` when `transpose_b`.
pub fn batch_matmul(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    ensure_finite(a, "batch_matmul")?;
    ensure_finite(b, "batch_matmul")?;
    let (groups, m, k, n) = bmm_dims(a, b, transpose_b)?;
    let mut out = Vec::with_capacity(groups * m * n);
    for g in 0..groups {
        let ag = &a.data()[g * m * k..(g + 1) * m * k];
        let bg = &b.data()[g * k * n..(g + 1) * k * n];
        if transpose_b {
            out.extend(mm_bt(ag, bg, m, k, n));
        } else {
            out.extend(mm(ag, bg, m, k, n));
        }
    }
    let mut shape = a.shape().to_vec();
    let r = shape.len();
    shape[r - 1] = n;
    Tensor::new(shape, out)
}

/// `b` must have the shape of `a` or a suffix of it.
fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    a.rank() >= b.rank() && a.shape()[a.rank() - b.rank()..] == *b.shape()
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, "add", |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, "mul", |x, y| x * y)
}

fn binary(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    ensure_finite(a, op)?;
    ensure_finite(b, op)?;
    if !broadcast_ok(a, b) {
        return Err(shape_err(op, a, b));
    }
    let nb = b.numel().max(1);
    let data = a.data().iter().enumerate().map(|(i, &x)| f(x, b.data()[i % nb])).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Sums `g` (shape of the broadcast output) down to `target` shape.
pub(crate) fn reduce_to(g: &Tensor, target: &[usize]) -> Tensor {
    let nb: usize = target.iter().product();
    if nb == g.numel() {
        return Tensor::new(target.to_vec(), g.data().to_vec()).expect("same numel");
    }
    let mut out = vec![0.0; nb];
    for row in g.data().chunks_exact(nb) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    Tensor::new(target.to_vec(), out).expect("numel matches")
}

pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
    ensure_finite(a, "scale")?;
    Ok(a.map(|x| x * s))
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GeLU, x·Φ(x).
pub fn gelu(a: &Tensor) -> Result<Tensor> {
    ensure_finite(a, "gelu")?;
    Ok(a.map(|x| x * std_normal_cdf(x)))
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

/// Softmax over the last axis.
pub fn softmax(a: &Tensor) -> Result<Tensor> {
    ensure_finite(a, "softmax")?;
    let n = a.last_dim();
    let mut out = a.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Per-row mean and 1/sqrt(var + eps) over the last axis.
pub(crate) fn row_stats(x: &Tensor, eps: f64) -> Vec<(f64, f64)> {
    let d = x.last_dim();
    x.data()
        .chunks_exact(d)
        .map(|row| {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

/// Normalizes each row over the last axis, then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    ensure_finite(x, "layer_norm")?;
    let d = x.last_dim();
    if gain.shape() != [d] {
        return Err(shape_err("layer_norm", x, gain));
    }
    if bias.shape() != [d] {
        return Err(shape_err("layer_norm", x, bias));
    }
    let stats = row_stats(x, eps);
    let mut out = Vec::with_capacity(x.numel());
    for (row, (mean, rstd)) in x.data().chunks_exact(d).zip(stats) {
        for j in 0..d {
            out.push((row[j] - mean) * rstd * gain.data()[j] + bias.data()[j]);
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out)?;
    ensure_finite(&out, "layer_norm")?;
    Ok(out)
}

/// Rows of `table` selected by `ids`; output shape is `ids_shape + [d]`.
pub fn embedding(table: &Tensor, ids: &[usize], ids_shape: &[usize]) -> Result<Tensor> {
    ensure_finite(table, "embedding")?;
    if table.rank() != 2 {
        return Err(Error::Shape { op: "embedding", left: table.shape().to_vec(), right: ids_shape.to_vec() });
    }
    if ids_shape.iter().product::<usize>() != ids.len() {
        return Err(Error::Shape { op: "embedding", left: ids_shape.to_vec(), right: vec![ids.len()] });
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(ids.len() * d);
    for (pos, &id) in ids.iter().enumerate() {
        if id >= v {
            return Err(Error::Input { position: pos, reason: format!("id {id} outside table of {v} rows") });
        }
        out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    let mut shape = ids_shape.to_vec();
    shape.push(d);
    Tensor::new(shape, out)
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    ensure_finite(logits, "cross_entropy")?;
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::Shape { op: "cross_entropy", left: logits.shape().to_vec(), right: vec![labels.len()] });
    }
    let c = logits.shape()[1];
    if let Some(pos) = labels.iter().position(|&l| l >= c) {
        return Err(Error::Input { position: pos, reason: format!("label {} outside {c} classes", labels[pos]) });
    }
    Ok((labels.len(), c))
}

/// Negative log-likelihood of each example, shape `[B]`.
pub fn cross_entropy_per_example(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = check_labels(logits, labels)?;
    let losses = (0..b)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - row[labels[i]]
        })
        .collect();
    Ok(Tensor::from_vec(losses))
}

/// Mean negative log-likelihood over the batch.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let per = cross_entropy_per_example(logits, labels)?;
    Ok(Tensor::scalar(per.sum() / labels.len() as f64))
}

/// `[B, S, H·dh] → [B, H, S, dh]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    if x.rank() != 3 || heads == 0 || !x.shape()[2].is_multiple_of(heads) {
        return Err(Error::Shape { op: "split_heads", left: x.shape().to_vec(), right: vec![heads] });
    }
    let (b, s, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = d / heads;
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        for si in 0..s {
            for h in 0..heads {
                let src = ((bi * s + si) * d) + h * dh;
                let dst = ((bi * heads + h) * s + si) * dh;
                out[dst..dst + dh].copy_from_slice(&x.data()[src..src + dh]);
            }
        }
    }
    Tensor::new(vec![b, heads, s, dh], out)
}

/// `[B, H, S, dh] → [B, S, H·dh]`.
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::Shape { op: "merge_heads", left: x.shape().to_vec(), right: vec![] });
    }
    let (b, heads, s, dh) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let d = heads * dh;
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        for h in 0..heads {
            for si in 0..s {
                let src = ((bi * heads + h) * s + si) * dh;
                let dst = ((bi * s + si) * d) + h * dh;
                out[dst..dst + dh].copy_from_slice(&x.data()[src..src + dh]);
            }
        }
    }
    Tensor::new(vec![b, s, d], out)
}

/// Mean over axis 1 of `[B, S, D]`.
pub fn mean_over_sequence(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::Shape { op: "mean_over_sequence", left: x.shape().to_vec(), right: vec![] });
    }
    let (b, s, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; b * d];
    for bi in 0..b {
        let o = &mut out[bi * d..(bi + 1) * d];
        for si in 0..s {
            let row = &x.data()[(bi * s + si) * d..(bi * s + si + 1) * d];
            for (a, v) in o.iter_mut().zip(row) {
                *a += v;
            }
        }
        for a in o.iter_mut() {
            *a /= s as f64;
        }
    }
    Tensor::new(vec![b, d], out)
}
