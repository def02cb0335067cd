//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation appends a node holding its output value. [`Tape::backward`]
//! walks the tape in reverse and returns gradients for trainable parameters.
//!
//! Nodes also track whether their leading axis is a batch axis. A batched
//! node's rows belong to distinct examples, which lets
//! [`Tape::per_example_backward`] split every parameter gradient into one
//! contribution per example in a single reverse pass: an operation that
//! combines a batched input with a parameter has its vector-Jacobian product
//! evaluated once per example on that example's slice. Operations that reduce
//! across the batch axis mark their output as mixed, and per-example
//! gradients are refused for anything downstream of them.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops::{self, ensure_finite, mm, mm_at, mm_bt, reduce_to};
use crate::peft::lphm;
use crate::tensor::{DType, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    BatchMatMul { a: usize, b: usize, transpose_b: bool },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Softmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Embedding { table: usize, ids: Vec<usize>, ids_shape: Vec<usize> },
    SplitHeads { x: usize },
    MergeHeads { x: usize, heads: usize },
    MeanSeq(usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, per_example: bool },
    Sum(usize),
    Mean(usize),
    Lphm { x: usize, a: Vec<usize>, s: Vec<usize>, t: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _) | Op::Gelu(a) | Op::Softmax(a) | Op::MeanSeq(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::SplitHeads { x, .. } | Op::MergeHeads { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Lphm { x, a, s, t } => {
                let mut v = vec![*x];
                v.extend(a);
                v.extend(s);
                v.extend(t);
                v
            }
        }
    }

    /// The same operation restricted to example `e` of `batch`.
    fn slice_example(&self, e: usize, batch: usize) -> Op {
        match self {
            Op::Embedding { table, ids, ids_shape } => {
                let per = ids.len() / batch;
                let mut shape = ids_shape.clone();
                shape[0] = 1;
                Op::Embedding { table: *table, ids: ids[e * per..(e + 1) * per].to_vec(), ids_shape: shape }
            }
            Op::CrossEntropy { logits, labels, per_example } => {
                Op::CrossEntropy { logits: *logits, labels: vec![labels[e]], per_example: *per_example }
            }
            other => other.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    batch: Option<usize>,
    mixed: bool,
    param: Option<String>,
}

/// Gradients of a scalar loss, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }
}

/// Per-example gradients: each tensor has shape `[B] + param shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleGradients {
    pub batch: usize,
    pub grads: BTreeMap<String, Tensor>,
}

impl PerExampleGradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    /// Gradient of example `e` for parameter `name`.
    pub fn example(&self, name: &str, e: usize) -> Option<Tensor> {
        self.grads.get(name).map(|t| t.index_outer(e))
    }

    /// Sum over examples, i.e. the gradient of the summed loss.
    pub fn summed(&self) -> Gradients {
        let grads = self
            .grads
            .iter()
            .map(|(name, t)| {
                let shape = &t.shape()[1..];
                (name.clone(), reduce_to(t, shape))
            })
            .collect();
        Gradients { grads }
    }
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    dtype: DType,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn slice_rows(t: &Tensor, e: usize, batch: usize) -> Tensor {
    let per = t.numel() / batch;
    let mut shape = t.shape().to_vec();
    shape[0] = 1;
    Tensor::new(shape, t.data()[e * per..(e + 1) * per].to_vec()).expect("slice shape")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_dtype(DType::F64)
    }

    /// A tape whose activations are rounded to `dtype` after every operation.
    pub fn with_dtype(dtype: DType) -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), dtype }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::State("variable does not belong to this tape".into()));
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    /// Whether `v`'s leading axis is a batch axis, and its size.
    pub fn batch_of(&self, v: Var) -> Option<usize> {
        self.nodes[v.idx].batch
    }

    fn push(&mut self, mut value: Tensor, op: Op, batch: Option<usize>, mixed: bool) -> Var {
        value.round_to(self.dtype);
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, batch, mixed, param: None });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, batch: Option<usize>, param: Option<String>) -> Result<Var> {
        ensure_finite(&value, "leaf")?;
        let mut value = value;
        value.round_to(self.dtype);
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, batch, mixed: false, param });
        Ok(Var { tape: self.id, idx: self.nodes.len() - 1 })
    }

    /// Registers a named parameter. Frozen parameters act as constants.
    pub fn param(&mut self, name: &str, value: &Tensor, trainable: bool) -> Result<Var> {
        self.leaf(value.clone(), trainable, None, Some(name.to_string()))
    }

    /// A constant with no batch axis.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false, None, None)
    }

    /// A constant whose leading axis indexes examples.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        let b = *value.shape().first().ok_or_else(|| Error::Shape { op: "input", left: vec![], right: vec![] })?;
        self.leaf(value, false, Some(b), None)
    }

    /// Batch size and mixed flag of an operation's output.
    fn join(&self, op: &'static str, inputs: &[usize]) -> Result<(Option<usize>, bool)> {
        let mut batch = None;
        let mut mixed = false;
        for &i in inputs {
            let n = &self.nodes[i];
            mixed |= n.mixed;
            match (batch, n.batch) {
                (None, b) => batch = b,
                (Some(a), Some(b)) if a != b => return Err(Error::Shape { op, left: vec![a], right: vec![b] }),
                _ => {}
            }
        }
        Ok((batch, mixed))
    }

    fn finish(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        batch: Option<usize>,
        mixed: bool,
    ) -> Result<Var> {
        ensure_finite(&value, op_name)?;
        Ok(self.push(value, op, batch, mixed))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        if self.nodes[ib].batch.is_some() {
            return Err(Error::State("matmul: right operand must not carry a batch axis".into()));
        }
        let (batch, mixed) = self.join("matmul", &[ia, ib])?;
        let v = ops::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        self.finish("matmul", v, Op::MatMul(ia, ib), batch, mixed)
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (batch, mixed) = self.join("batch_matmul", &[ia, ib])?;
        let v = ops::batch_matmul(&self.nodes[ia].value, &self.nodes[ib].value, transpose_b)?;
        self.finish("batch_matmul", v, Op::BatchMatMul { a: ia, b: ib, transpose_b }, batch, mixed)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.broadcast_batch_check("add", ia, ib)?;
        let (batch, mixed) = self.join("add", &[ia, ib])?;
        let v = ops::add(&self.nodes[ia].value, &self.nodes[ib].value)?;
        self.finish("add", v, Op::Add(ia, ib), batch, mixed)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.broadcast_batch_check("mul", ia, ib)?;
        let (batch, mixed) = self.join("mul", &[ia, ib])?;
        let v = ops::mul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        self.finish("mul", v, Op::Mul(ia, ib), batch, mixed)
    }

    /// A broadcast right operand must not carry a batch axis.
    fn broadcast_batch_check(&self, op: &'static str, ia: usize, ib: usize) -> Result<()> {
        let (a, b) = (&self.nodes[ia], &self.nodes[ib]);
        if b.batch.is_some() && a.value.shape() != b.value.shape() {
            return Err(Error::Shape { op, left: a.value.shape().to_vec(), right: b.value.shape().to_vec() });
        }
        Ok(())
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let (batch, mixed) = self.join("scale", &[ia])?;
        let v = ops::scale(&self.nodes[ia].value, s)?;
        self.finish("scale", v, Op::Scale(ia, s), batch, mixed)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (batch, mixed) = self.join("gelu", &[ia])?;
        let v = ops::gelu(&self.nodes[ia].value)?;
        self.finish("gelu", v, Op::Gelu(ia), batch, mixed)
    }

    /// Whether a last-axis reduction of node `i` runs across examples.
    fn last_axis_is_batch(&self, i: usize) -> bool {
        self.nodes[i].batch.is_some() && self.nodes[i].value.rank() == 1
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (batch, mut mixed) = self.join("softmax", &[ia])?;
        mixed |= self.last_axis_is_batch(ia);
        let v = ops::softmax(&self.nodes[ia].value)?;
        self.finish("softmax", v, Op::Softmax(ia), batch, mixed)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        if self.nodes[ig].batch.is_some() || self.nodes[ib].batch.is_some() {
            return Err(Error::State("layer_norm: gain and bias must not carry a batch axis".into()));
        }
        let (batch, mut mixed) = self.join("layer_norm", &[ix, ig, ib])?;
        mixed |= self.last_axis_is_batch(ix);
        let v = ops::layer_norm(&self.nodes[ix].value, &self.nodes[ig].value, &self.nodes[ib].value, eps)?;
        self.finish("layer_norm", v, Op::LayerNorm { x: ix, gain: ig, bias: ib, eps }, batch, mixed)
    }

    /// Looks up rows of `table`. With `batched`, the leading axis of
    /// `ids_shape` indexes examples.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize], batched: bool) -> Result<Var> {
        let it = self.check(table)?;
        let (_, mixed) = self.join("embedding", &[it])?;
        let v = ops::embedding(&self.nodes[it].value, ids, ids_shape)?;
        let batch = if batched { ids_shape.first().copied() } else { None };
        let op = Op::Embedding { table: it, ids: ids.to_vec(), ids_shape: ids_shape.to_vec() };
        self.finish("embedding", v, op, batch, mixed)
    }

    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let (batch, mixed) = self.join("split_heads", &[ix])?;
        let v = ops::split_heads(&self.nodes[ix].value, heads)?;
        self.finish("split_heads", v, Op::SplitHeads { x: ix }, batch, mixed)
    }

    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let (batch, mixed) = self.join("merge_heads", &[ix])?;
        let heads = self.nodes[ix].value.shape().get(1).copied().unwrap_or(1);
        let v = ops::merge_heads(&self.nodes[ix].value)?;
        self.finish("merge_heads", v, Op::MergeHeads { x: ix, heads }, batch, mixed)
    }

    pub fn mean_over_sequence(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let (batch, mixed) = self.join("mean_over_sequence", &[ix])?;
        let v = ops::mean_over_sequence(&self.nodes[ix].value)?;
        self.finish("mean_over_sequence", v, Op::MeanSeq(ix), batch, mixed)
    }

    /// Mean cross-entropy over the batch (a scalar).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let (batch, mixed) = self.join("cross_entropy", &[il])?;
        let v = ops::cross_entropy(&self.nodes[il].value, labels)?;
        let op = Op::CrossEntropy { logits: il, labels: labels.to_vec(), per_example: false };
        self.finish("cross_entropy", v, op, None, mixed || batch.is_some())
    }

    /// Cross-entropy of each example, shape `[B]`.
    pub fn cross_entropy_per_example(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let (batch, mixed) = self.join("cross_entropy", &[il])?;
        let v = ops::cross_entropy_per_example(&self.nodes[il].value, labels)?;
        let op = Op::CrossEntropy { logits: il, labels: labels.to_vec(), per_example: true };
        self.finish("cross_entropy", v, op, batch, mixed)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (batch, mixed) = self.join("sum", &[ia])?;
        let v = Tensor::scalar(self.nodes[ia].value.sum());
        self.finish("sum", v, Op::Sum(ia), None, mixed || batch.is_some())
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (batch, mixed) = self.join("mean", &[ia])?;
        let t = &self.nodes[ia].value;
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.finish("mean", v, Op::Mean(ia), None, mixed || batch.is_some())
    }

    /// `x · M` over the last axis of `x`, where `M = Σᵢ Aᵢ ⊗ (Sᵢ Tᵢ)`.
    pub fn lphm(&mut self, x: Var, a: &[Var], s: &[Var], t: &[Var]) -> Result<Var> {
        let ix = self.check(x)?;
        let n = a.len();
        if n == 0 || s.len() != n || t.len() != n {
            return Err(Error::State("lphm needs n matrices of each kind".into()));
        }
        let ia: Vec<usize> = a.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let is: Vec<usize> = s.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let it: Vec<usize> = t.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        for &i in ia.iter().chain(&is).chain(&it) {
            if self.nodes[i].batch.is_some() {
                return Err(Error::State("lphm factors must not carry a batch axis".into()));
            }
        }
        let dims = lphm::Dims::of(&self.nodes[is[0]].value, &self.nodes[it[0]].value, n);
        let xv = &self.nodes[ix].value;
        if xv.last_dim() != dims.n * dims.an {
            return Err(Error::Shape {
                op: "lphm",
                left: xv.shape().to_vec(),
                right: vec![dims.n * dims.an, dims.n * dims.bn],
            });
        }
        for i in 0..n {
            let (av, sv, tv) = (&self.nodes[ia[i]].value, &self.nodes[is[i]].value, &self.nodes[it[i]].value);
            if av.shape() != [n, n] || sv.shape() != [dims.an, dims.k] || tv.shape() != [dims.k, dims.bn] {
                return Err(Error::Shape { op: "lphm", left: sv.shape().to_vec(), right: tv.shape().to_vec() });
            }
        }
        let mut all = vec![ix];
        all.extend(&ia);
        all.extend(&is);
        all.extend(&it);
        let (batch, mixed) = self.join("lphm", &all)?;
        let data = |v: &[usize]| v.iter().map(|&i| self.nodes[i].value.data()).collect::<Vec<_>>();
        let out = lphm::rows_forward(xv.data(), xv.rows(), &dims, &data(&ia), &data(&is), &data(&it));
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = dims.n * dims.bn;
        let value = Tensor::new(shape, out)?;
        let op = Op::Lphm { x: ix, a: ia, s: is, t: it };
        self.finish("lphm", value, op, batch, mixed)
    }

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il =
            self.check(loss).map_err(|_| Error::State("backward called without a forward pass on this tape".into()))?;
        if self.nodes[il].value.numel() != 1 {
            return Err(Error::Shape { op: "backward", left: self.nodes[il].value.shape().to_vec(), right: vec![] });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; il + 1];
        grads[il] = Some(Tensor::full(self.nodes[il].value.shape(), 1.0));
        for idx in (0..=il).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let inputs = node.op.inputs();
            let need: Vec<bool> = inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let vals: Vec<Cow<Tensor>> = inputs.iter().map(|&i| Cow::Borrowed(&self.nodes[i].value)).collect();
            let res = vjp(&node.op, &vals, &node.value, &g, &need)?;
            for (&i, r) in inputs.iter().zip(res) {
                if let Some(r) = r {
                    accumulate(&mut grads[i], r);
                }
            }
        }
        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate().take(il + 1) {
            if let (Some(name), true) = (&node.param, node.requires_grad) {
                let g = grads[idx].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.grads.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    /// Gradients of every example's loss in `losses` (shape `[B]`) with
    /// respect to every trainable parameter.
    pub fn per_example_backward(&self, losses: Var) -> Result<PerExampleGradients> {
        let il = self
            .check(losses)
            .map_err(|_| Error::State("backward called without a forward pass on this tape".into()))?;
        let root = &self.nodes[il];
        if root.mixed {
            return Err(Error::State("per-example gradients requested after an operation that mixed examples".into()));
        }
        let batch = match root.batch {
            Some(b) if root.value.shape() == [b] => b,
            _ => {
                return Err(Error::State(format!(
                    "per-example gradients need a loss vector with one entry per example, got shape {:?}",
                    root.value.shape()
                )))
            }
        };
        let n = il + 1;
        let mut full: Vec<Option<Tensor>> = vec![None; n];
        let mut per: Vec<Option<Vec<Option<Tensor>>>> = vec![None; n];
        full[il] = Some(Tensor::full(&[batch], 1.0));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let inputs = node.op.inputs();
            let in_batched: Vec<bool> = inputs.iter().map(|&i| self.nodes[i].batch.is_some()).collect();
            let in_grad: Vec<bool> = inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            if node.batch.is_some() {
                let Some(g) = full[idx].take() else { continue };
                let need_full: Vec<bool> = in_grad.iter().zip(&in_batched).map(|(&r, &b)| r && b).collect();
                let need_each: Vec<bool> = in_grad.iter().zip(&in_batched).map(|(&r, &b)| r && !b).collect();
                if need_full.iter().any(|&x| x) {
                    let vals: Vec<Cow<Tensor>> = inputs.iter().map(|&i| Cow::Borrowed(&self.nodes[i].value)).collect();
                    let res = vjp(&node.op, &vals, &node.value, &g, &need_full)?;
                    for (&i, r) in inputs.iter().zip(res) {
                        if let Some(r) = r {
                            accumulate(&mut full[i], r);
                        }
                    }
                }
                if need_each.iter().any(|&x| x) {
                    for e in 0..batch {
                        let op = node.op.slice_example(e, batch);
                        let vals: Vec<Cow<Tensor>> = inputs
                            .iter()
                            .zip(&in_batched)
                            .map(|(&i, &b)| {
                                if b {
                                    Cow::Owned(slice_rows(&self.nodes[i].value, e, batch))
                                } else {
                                    Cow::Borrowed(&self.nodes[i].value)
                                }
                            })
                            .collect();
                        let out = slice_rows(&node.value, e, batch);
                        let ge = slice_rows(&g, e, batch);
                        let res = vjp(&op, &vals, &out, &ge, &need_each)?;
                        for (&i, r) in inputs.iter().zip(res) {
                            if let Some(r) = r {
                                let slots = per[i].get_or_insert_with(|| vec![None; batch]);
                                accumulate(&mut slots[e], r);
                            }
                        }
                    }
                }
            } else {
                let Some(slots) = per[idx].take() else { continue };
                let vals: Vec<Cow<Tensor>> = inputs.iter().map(|&i| Cow::Borrowed(&self.nodes[i].value)).collect();
                for (e, ge) in slots.into_iter().enumerate() {
                    let Some(ge) = ge else { continue };
                    let res = vjp(&node.op, &vals, &node.value, &ge, &in_grad)?;
                    for (&i, r) in inputs.iter().zip(res) {
                        if let Some(r) = r {
                            let s = per[i].get_or_insert_with(|| vec![None; batch]);
                            accumulate(&mut s[e], r);
                        }
                    }
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(n) {
            if let (Some(name), true) = (&node.param, node.requires_grad) {
                let slots = per[idx].take().unwrap_or_else(|| vec![None; batch]);
                let parts: Vec<Tensor> =
                    slots.into_iter().map(|s| s.unwrap_or_else(|| Tensor::zeros(node.value.shape()))).collect();
                grads.insert(name.clone(), Tensor::stack(&parts)?);
            }
        }
        Ok(PerExampleGradients { batch, grads })
    }
}

/// Vector-Jacobian products of `op` for the inputs flagged in `need`.
fn vjp(op: &Op, x: &[Cow<Tensor>], out: &Tensor, g: &Tensor, need: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let mut res: Vec<Option<Tensor>> = vec![None; x.len()];
    match op {
        Op::Leaf => {}
        Op::MatMul(..) => {
            let (a, b) = (&x[0], &x[1]);
            let (m, k, n) = (a.rows(), b.shape()[0], b.shape()[1]);
            if need[0] {
                res[0] = Some(Tensor::new(a.shape().to_vec(), mm_bt(g.data(), b.data(), m, n, k))?);
            }
            if need[1] {
                res[1] = Some(Tensor::new(vec![k, n], mm_at(a.data(), g.data(), m, k, n))?);
            }
        }
        Op::BatchMatMul { transpose_b, .. } => {
            let (a, b) = (&x[0], &x[1]);
            let r = a.rank();
            let (m, k) = (a.shape()[r - 2], a.shape()[r - 1]);
            let n = out.shape()[r - 1];
            let groups = a.numel() / (m * k);
            let mut da = Vec::with_capacity(if need[0] { a.numel() } else { 0 });
            let mut db = Vec::with_capacity(if need[1] { b.numel() } else { 0 });
            for grp in 0..groups {
                let ag = &a.data()[grp * m * k..(grp + 1) * m * k];
                let bg = &b.data()[grp * k * n..(grp + 1) * k * n];
                let gg = &g.data()[grp * m * n..(grp + 1) * m * n];
                if *transpose_b {
                    if need[0] {
                        da.extend(mm(gg, bg, m, n, k));
                    }
                    if need[1] {
                        db.extend(mm_at(gg, ag, m, n, k));
                    }
                } else {
                    if need[0] {
                        da.extend(mm_bt(gg, bg, m, n, k));
                    }
                    if need[1] {
                        db.extend(mm_at(ag, gg, m, k, n));
                    }
                }
            }
            if need[0] {
                res[0] = Some(Tensor::new(a.shape().to_vec(), da)?);
            }
            if need[1] {
                res[1] = Some(Tensor::new(b.shape().to_vec(), db)?);
            }
        }
        Op::Add(..) => {
            if need[0] {
                res[0] = Some(g.clone());
            }
            if need[1] {
                res[1] = Some(reduce_to(g, x[1].shape()));
            }
        }
        Op::Mul(..) => {
            if need[0] {
                res[0] = Some(ops::mul(g, &x[1])?);
            }
            if need[1] {
                res[1] = Some(reduce_to(&ops::mul(g, &x[0])?, x[1].shape()));
            }
        }
        Op::Scale(_, s) => {
            if need[0] {
                res[0] = Some(g.map(|v| v * s));
            }
        }
        Op::Gelu(_) => {
            if need[0] {
                let d = x[0].data().iter().zip(g.data()).map(|(&xi, &gi)| gi * ops::gelu_derivative(xi));
                res[0] = Some(Tensor::new(x[0].shape().to_vec(), d.collect())?);
            }
        }
        Op::Softmax(_) => {
            if need[0] {
                let n = out.last_dim();
                let mut d = Vec::with_capacity(out.numel());
                for (y, gr) in out.data().chunks_exact(n).zip(g.data().chunks_exact(n)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(y.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                }
                res[0] = Some(Tensor::new(out.shape().to_vec(), d)?);
            }
        }
        Op::LayerNorm { eps, .. } => {
            let (xv, gain) = (&x[0], &x[1]);
            let d = xv.last_dim();
            let stats = ops::row_stats(xv, *eps);
            let mut dx = Vec::with_capacity(if need[0] { xv.numel() } else { 0 });
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for ((row, gr), (mean, rstd)) in xv.data().chunks_exact(d).zip(g.data().chunks_exact(d)).zip(stats) {
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                for j in 0..d {
                    dgain[j] += gr[j] * xhat[j];
                    dbias[j] += gr[j];
                }
                if need[0] {
                    let dxhat: Vec<f64> = (0..d).map(|j| gr[j] * gain.data()[j]).collect();
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    dx.extend((0..d).map(|j| rstd * (dxhat[j] - m1 - xhat[j] * m2)));
                }
            }
            if need[0] {
                res[0] = Some(Tensor::new(xv.shape().to_vec(), dx)?);
            }
            if need[1] {
                res[1] = Some(Tensor::from_vec(dgain));
            }
            if need[2] {
                res[2] = Some(Tensor::from_vec(dbias));
            }
        }
        Op::Embedding { ids, .. } => {
            if need[0] {
                let table = &x[0];
                let d = table.shape()[1];
                let mut dt = Tensor::zeros(table.shape());
                for (pos, &id) in ids.iter().enumerate() {
                    let src = &g.data()[pos * d..(pos + 1) * d];
                    for (a, b) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(src) {
                        *a += b;
                    }
                }
                res[0] = Some(dt);
            }
        }
        Op::SplitHeads { .. } => {
            if need[0] {
                res[0] = Some(ops::merge_heads(g)?);
            }
        }
        Op::MergeHeads { heads, .. } => {
            if need[0] {
                res[0] = Some(ops::split_heads(g, *heads)?);
            }
        }
        Op::MeanSeq(_) => {
            if need[0] {
                let xs = x[0].shape();
                let (b, s, d) = (xs[0], xs[1], xs[2]);
                let mut dx = Vec::with_capacity(b * s * d);
                for bi in 0..b {
                    let gr = &g.data()[bi * d..(bi + 1) * d];
                    for _ in 0..s {
                        dx.extend(gr.iter().map(|v| v / s as f64));
                    }
                }
                res[0] = Some(Tensor::new(xs.to_vec(), dx)?);
            }
        }
        Op::CrossEntropy { labels, per_example, .. } => {
            if need[0] {
                let mut p = ops::softmax(&x[0])?;
                let c = p.last_dim();
                let b = labels.len();
                for (i, &label) in labels.iter().enumerate() {
                    let w = if *per_example { g.data()[i] } else { g.item() / b as f64 };
                    let row = &mut p.data_mut()[i * c..(i + 1) * c];
                    row[label] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= w;
                    }
                }
                res[0] = Some(p);
            }
        }
        Op::Sum(_) => {
            if need[0] {
                res[0] = Some(Tensor::full(x[0].shape(), g.item()));
            }
        }
        Op::Mean(_) => {
            if need[0] {
                res[0] = Some(Tensor::full(x[0].shape(), g.item() / x[0].numel() as f64));
            }
        }
        Op::Lphm { a, .. } => {
            let n = a.len();
            let xv = &x[0];
            let dims = lphm::Dims::of(&x[1 + n], &x[1 + 2 * n], n);
            let data = |r: std::ops::Range<usize>| x[r].iter().map(|t| t.data()).collect::<Vec<_>>();
            let grad = lphm::rows_backward(
                xv.data(),
                g.data(),
                xv.rows(),
                &dims,
                &data(1..1 + n),
                &data(1 + n..1 + 2 * n),
                &data(1 + 2 * n..1 + 3 * n),
            );
            if need[0] {
                res[0] = Some(Tensor::new(xv.shape().to_vec(), grad.x)?);
            }
            for (i, v) in grad.a.into_iter().enumerate() {
                if need[1 + i] {
                    res[1 + i] = Some(Tensor::new(vec![n, n], v)?);
                }
            }
            for (i, v) in grad.s.into_iter().enumerate() {
                if need[1 + n + i] {
                    res[1 + n + i] = Some(Tensor::new(vec![dims.an, dims.k], v)?);
                }
            }
            for (i, v) in grad.t.into_iter().enumerate() {
                if need[1 + 2 * n + i] {
                    res[1 + 2 * n + i] = Some(Tensor::new(vec![dims.k, dims.bn], v)?);
                }
            }
        }
    }
    Ok(res)
}
