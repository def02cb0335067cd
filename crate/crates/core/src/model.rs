//! A small pre-norm transformer encoder with a mean-pooled classifier head.
//!
//! The forward pass is written once, against a [`Forward`] binder that looks
//! parameters up by name across one or more stores, and a [`Hooks`] object
//! that decides how every weight matrix is applied and what happens after
//! each sublayer. Parameter-efficient methods and RGP plug in through those
//! two hooks without touching the block structure.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, PerExampleGradients, Tape, Var};
use crate::error::{config_err, Error, Result};
use crate::param::{ParamAccess, ParamStore, Parameter};
use crate::rng;
use crate::tensor::{DType, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    pub seed: u64,
    #[serde(default)]
    pub dtype: DType,
}

/// Name and shape of one parameter, without its values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamShape {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        ParamShape { name: name.into(), shape }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// The six weight matrices of a block, in the order they are applied.
pub const BLOCK_MATRICES: [&str; 6] = ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn_in", "ffn_out"];

pub fn matrix_name(layer: usize, which: &str) -> String {
    format!("layer.{layer}.{which}")
}

impl ModelConfig {
    /// Desk-scale default used by tests and examples.
    pub fn tiny(seed: u64) -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 128,
            max_seq_len: 16,
            n_classes: 2,
            seed,
            dtype: DType::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
            ("n_classes", self.n_classes),
        ];
        for (field, v) in fields {
            if v == 0 {
                return Err(config_err(field, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(config_err(
                "d_model",
                format!("{} is not divisible by n_heads={}", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }

    /// Shape of a block matrix (`attn.wq`, `ffn_in`, ...).
    pub fn matrix_shape(&self, which: &str) -> (usize, usize) {
        let (d, f) = (self.d_model, self.d_ffn);
        match which {
            "ffn_in" => (d, f),
            "ffn_out" => (f, d),
            _ => (d, d),
        }
    }

    /// Every parameter of the model in construction order.
    pub fn param_plan(&self) -> Vec<ParamShape> {
        let (d, f) = (self.d_model, self.d_ffn);
        let mut plan = vec![
            ParamShape::new("embed.tok", vec![self.vocab_size, d]),
            ParamShape::new("embed.pos", vec![self.max_seq_len, d]),
        ];
        for i in 0..self.n_layers {
            plan.push(ParamShape::new(format!("layer.{i}.ln1.gain"), vec![d]));
            plan.push(ParamShape::new(format!("layer.{i}.ln1.bias"), vec![d]));
            for which in &BLOCK_MATRICES[..4] {
                plan.push(ParamShape::new(matrix_name(i, which), vec![d, d]));
            }
            plan.push(ParamShape::new(format!("layer.{i}.ln2.gain"), vec![d]));
            plan.push(ParamShape::new(format!("layer.{i}.ln2.bias"), vec![d]));
            plan.push(ParamShape::new(matrix_name(i, "ffn_in"), vec![d, f]));
            plan.push(ParamShape::new(matrix_name(i, "ffn_out"), vec![f, d]));
        }
        plan.push(ParamShape::new("ln_f.gain", vec![d]));
        plan.push(ParamShape::new("ln_f.bias", vec![d]));
        plan.push(ParamShape::new("head.w", vec![d, self.n_classes]));
        plan.push(ParamShape::new("head.b", vec![self.n_classes]));
        plan
    }

    pub fn param_count(&self) -> usize {
        self.param_plan().iter().map(ParamShape::numel).sum()
    }
}

fn init_value(seed: u64, p: &ParamShape, dtype: DType) -> Tensor {
    let mut t = if p.name.ends_with(".gain") {
        Tensor::full(&p.shape, 1.0)
    } else if p.name.contains("ln") && p.name.ends_with(".bias") {
        Tensor::zeros(&p.shape)
    } else {
        let mut r = rng::stream(seed, &format!("init/{}", p.name));
        Tensor::new(p.shape.clone(), rng::normal_vec(&mut r, p.numel(), INIT_STD)).expect("plan shape")
    };
    t.round_to(dtype);
    t
}

/// Integer token ids of shape `[batch, seq_len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize, seq_len: usize) -> Result<Self> {
        if ids.len() != batch * seq_len || batch == 0 || seq_len == 0 {
            return Err(Error::Shape { op: "token_batch", left: vec![batch, seq_len], right: vec![ids.len()] });
        }
        Ok(TokenBatch { ids, batch, seq_len })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let seq_len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq_len) {
            return Err(Error::State("token rows have different lengths".into()));
        }
        TokenBatch::new(rows.concat(), rows.len(), seq_len)
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Sub-batch made of the given rows.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let ids = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        TokenBatch::new(ids, rows.len(), self.seq_len)
    }
}

/// Binds named parameters from a list of stores onto a fresh tape. Each
/// parameter is placed on the tape once, on first use.
pub struct Forward<'a> {
    pub tape: Tape,
    stores: Vec<&'a ParamStore>,
    bound: HashMap<String, Var>,
}

impl<'a> Forward<'a> {
    pub fn new(stores: Vec<&'a ParamStore>, dtype: DType) -> Self {
        Forward { tape: Tape::with_dtype(dtype), stores, bound: HashMap::new() }
    }

    pub fn lookup(&self, name: &str) -> Option<&'a Parameter> {
        self.stores.iter().find_map(|s| s.get(name))
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self.lookup(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let v = self.tape.param(name, &p.value, p.trainable)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x · W` for the named matrix.
    pub fn linear(&mut self, weight: &str, x: Var) -> Result<Var> {
        let w = self.param(weight)?;
        self.tape.matmul(x, w)
    }

    /// `x · W + b`.
    pub fn affine(&mut self, weight: &str, bias: &str, x: Var) -> Result<Var> {
        let h = self.linear(weight, x)?;
        let b = self.param(bias)?;
        self.tape.add(h, b)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sublayer {
    Attention,
    Ffn,
}

/// Extension points of the forward pass.
pub trait Hooks {
    /// Applies the block matrix `weight` (a full name such as
    /// `layer.0.attn.wq`) to `x`.
    fn project(&self, f: &mut Forward<'_>, weight: &str, x: Var) -> Result<Var> {
        f.linear(weight, x)
    }

    /// Transforms a sublayer's output before the residual add.
    fn after_sublayer(&self, _f: &mut Forward<'_>, _layer: usize, _sub: Sublayer, h: Var) -> Result<Var> {
        Ok(h)
    }
}

pub struct NoHooks;

impl Hooks for NoHooks {}

fn layer_norm(f: &mut Forward<'_>, prefix: &str, x: Var) -> Result<Var> {
    let gain = f.param(&format!("{prefix}.gain"))?;
    let bias = f.param(&format!("{prefix}.bias"))?;
    f.tape.layer_norm(x, gain, bias, LN_EPS)
}

/// Runs the transformer and returns the binder with the logits node.
pub fn transformer_forward<'a>(
    config: &ModelConfig,
    stores: Vec<&'a ParamStore>,
    hooks: &dyn Hooks,
    batch: &TokenBatch,
) -> Result<(Forward<'a>, Var)> {
    if batch.seq_len > config.max_seq_len {
        return Err(Error::Input {
            position: config.max_seq_len,
            reason: format!("sequence length {} exceeds max_seq_len {}", batch.seq_len, config.max_seq_len),
        });
    }
    let (b, s) = (batch.batch, batch.seq_len);
    let heads = config.n_heads;
    let dh = config.d_model / heads;
    let mut f = Forward::new(stores, config.dtype);

    let tok = f.param("embed.tok")?;
    let tok = f.tape.embedding(tok, &batch.ids, &[b, s], true)?;
    let pos = f.param("embed.pos")?;
    let positions: Vec<usize> = (0..s).collect();
    let pos = f.tape.embedding(pos, &positions, &[s], false)?;
    let mut h = f.tape.add(tok, pos)?;

    for i in 0..config.n_layers {
        let a = layer_norm(&mut f, &format!("layer.{i}.ln1"), h)?;
        let q = hooks.project(&mut f, &matrix_name(i, "attn.wq"), a)?;
        let k = hooks.project(&mut f, &matrix_name(i, "attn.wk"), a)?;
        let v = hooks.project(&mut f, &matrix_name(i, "attn.wv"), a)?;
        let q = f.tape.split_heads(q, heads)?;
        let k = f.tape.split_heads(k, heads)?;
        let v = f.tape.split_heads(v, heads)?;
        let scores = f.tape.batch_matmul(q, k, true)?;
        let scores = f.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let probs = f.tape.softmax(scores)?;
        let ctx = f.tape.batch_matmul(probs, v, false)?;
        let ctx = f.tape.merge_heads(ctx)?;
        let o = hooks.project(&mut f, &matrix_name(i, "attn.wo"), ctx)?;
        let o = hooks.after_sublayer(&mut f, i, Sublayer::Attention, o)?;
        h = f.tape.add(h, o)?;

        let a = layer_norm(&mut f, &format!("layer.{i}.ln2"), h)?;
        let u = hooks.project(&mut f, &matrix_name(i, "ffn_in"), a)?;
        let u = f.tape.gelu(u)?;
        let o = hooks.project(&mut f, &matrix_name(i, "ffn_out"), u)?;
        let o = hooks.after_sublayer(&mut f, i, Sublayer::Ffn, o)?;
        h = f.tape.add(h, o)?;
    }
    let h = layer_norm(&mut f, "ln_f", h)?;
    let pooled = f.tape.mean_over_sequence(h)?;
    let logits = f.affine("head.w", "head.b", pooled)?;
    Ok((f, logits))
}

/// Something that maps token batches to class logits and exposes its
/// parameters to an optimizer.
pub trait Network: ParamAccess {
    fn model_config(&self) -> &ModelConfig;

    fn forward<'a>(&'a self, batch: &TokenBatch) -> Result<(Forward<'a>, Var)>;

    fn logits(&self, batch: &TokenBatch) -> Result<Tensor> {
        let (f, out) = self.forward(batch)?;
        Ok(f.value(out).clone())
    }

    fn predict(&self, batch: &TokenBatch) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        let c = logits.last_dim();
        Ok(logits
            .data()
            .chunks_exact(c)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Mean cross-entropy and its gradient.
    fn loss_and_grads(&self, batch: &TokenBatch, labels: &[usize]) -> Result<(f64, Gradients)> {
        let (mut f, logits) = self.forward(batch)?;
        let loss = f.tape.cross_entropy(logits, labels)?;
        let grads = f.tape.backward(loss)?;
        Ok((f.value(loss).item(), grads))
    }

    /// Per-example losses and per-example gradients.
    fn per_example(&self, batch: &TokenBatch, labels: &[usize]) -> Result<(Vec<f64>, PerExampleGradients)> {
        let (mut f, logits) = self.forward(batch)?;
        let losses = f.tape.cross_entropy_per_example(logits, labels)?;
        let grads = f.tape.per_example_backward(losses)?;
        Ok((f.value(losses).data().to_vec(), grads))
    }

    /// Shapes of the trainable parameters.
    fn trainable_shapes(&self) -> Vec<ParamShape> {
        self.trainable_names()
            .into_iter()
            .map(|n| {
                let shape = self.param(&n).expect("listed parameter").value.shape().to_vec();
                ParamShape::new(n, shape)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut params = ParamStore::new();
    for p in config.param_plan() {
        let value = init_value(config.seed, &p, config.dtype);
        params.insert(Parameter::new(p.name, value, true))?;
    }
    Ok(Model { config: config.clone(), params })
}

impl Model {
    pub fn freeze(&mut self, pattern: &str) -> Result<usize> {
        self.params.freeze(pattern)
    }

    pub fn unfreeze(&mut self, pattern: &str) -> Result<usize> {
        self.params.unfreeze(pattern)
    }
}

impl ParamAccess for Model {
    fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    fn trainable_names(&self) -> Vec<String> {
        self.params.trainable_names()
    }
}

impl Network for Model {
    fn model_config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward<'a>(&'a self, batch: &TokenBatch) -> Result<(Forward<'a>, Var)> {
        transformer_forward(&self.config, vec![&self.params], &NoHooks, batch)
    }
}
