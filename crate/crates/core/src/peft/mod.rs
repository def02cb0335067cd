//! Parameter-efficient fine-tuning: a frozen base model plus a small set of
//! new trainable parameters θ that change how the base computes.
//!
//! Three methods are provided. LoRA adds a low-rank branch `x·L·R` next to
//! selected weight matrices. Adapters insert a residual bottleneck
//! `h + U(gelu(D(h)))` after sublayers. Compacter uses the adapter layout
//! with both projections replaced by LPHM matrices whose `Aᵢ` factors are
//! shared by every adapter in the model. Each method is initialized so the
//! augmented model computes exactly what the base does.

pub mod lphm;
pub mod plugin;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::checkpoint::fingerprint;
use crate::error::{config_err, Error, Result};
use crate::model::{
    matrix_name, transformer_forward, Forward, Hooks, Model, ModelConfig, Network, ParamShape, Sublayer, TokenBatch,
    BLOCK_MATRICES, INIT_STD,
};
use crate::ops;
use crate::param::{ParamAccess, ParamStore, Parameter};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lora,
    Adapter,
    Compacter,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::Adapter => "adapter",
            Method::Compacter => "compacter",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Method> {
        match tag {
            "lora" => Some(Method::Lora),
            "adapter" => Some(Method::Adapter),
            "compacter" => Some(Method::Compacter),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    AttentionQv,
    AttentionAll,
    AttentionAndFfn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeftSpec {
    pub method: Method,
    pub r: usize,
    #[serde(default = "one")]
    pub n: usize,
    #[serde(default = "one")]
    pub k: usize,
    /// Defaults to `attention_qv` for LoRA and `attention_and_ffn` for the
    /// adapter methods.
    #[serde(default)]
    pub placement: Option<Placement>,
}

fn one() -> usize {
    1
}

impl PeftSpec {
    pub fn lora(r: usize) -> Self {
        PeftSpec { method: Method::Lora, r, n: 1, k: 1, placement: None }
    }

    pub fn adapter(r: usize) -> Self {
        PeftSpec { method: Method::Adapter, ..PeftSpec::lora(r) }
    }

    pub fn compacter(r: usize, n: usize, k: usize) -> Self {
        PeftSpec { method: Method::Compacter, r, n, k, placement: None }
    }

    pub fn with_placement(mut self, p: Placement) -> Self {
        self.placement = Some(p);
        self
    }

    pub fn placement(&self) -> Placement {
        self.placement.unwrap_or(match self.method {
            Method::Lora => Placement::AttentionQv,
            _ => Placement::AttentionAndFfn,
        })
    }

    /// Full names of the base matrices LoRA augments.
    pub fn lora_targets(&self, config: &ModelConfig) -> Vec<String> {
        let which: &[&str] = match self.placement() {
            Placement::AttentionQv => &["attn.wq", "attn.wv"],
            Placement::AttentionAll => &BLOCK_MATRICES[..4],
            Placement::AttentionAndFfn => &BLOCK_MATRICES,
        };
        (0..config.n_layers).flat_map(|i| which.iter().map(move |w| matrix_name(i, w))).collect()
    }

    /// Sublayers followed by an adapter.
    pub fn adapter_sublayers(&self) -> &'static [Sublayer] {
        match self.placement() {
            Placement::AttentionAndFfn => &[Sublayer::Attention, Sublayer::Ffn],
            _ => &[Sublayer::Attention],
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.r == 0 {
            return Err(config_err("r", "must be at least 1"));
        }
        match self.method {
            Method::Lora => {
                for name in self.lora_targets(config) {
                    let which = name.splitn(3, '.').nth(2).expect("layer.i.which");
                    let (a, b) = config.matrix_shape(which);
                    if self.r >= a.min(b) {
                        return Err(config_err(
                            "r",
                            format!("rank {} is not low-rank for the {a}x{b} matrix {name}", self.r),
                        ));
                    }
                }
            }
            Method::Adapter | Method::Compacter => {
                let d = config.d_model;
                if self.r >= d {
                    return Err(config_err("r", format!("bottleneck {} must be below d_model={d}", self.r)));
                }
                if self.method == Method::Compacter {
                    lphm::check_dims(d, self.r, self.n, self.k)?;
                }
            }
        }
        Ok(())
    }

    /// Every θ parameter in construction order.
    pub fn theta_plan(&self, config: &ModelConfig) -> Result<Vec<ParamShape>> {
        self.validate(config)?;
        let d = config.d_model;
        let r = self.r;
        let mut plan = Vec::new();
        match self.method {
            Method::Lora => {
                for name in self.lora_targets(config) {
                    let which = name.splitn(3, '.').nth(2).expect("layer.i.which");
                    let (a, b) = config.matrix_shape(which);
                    plan.push(ParamShape::new(format!("lora.{name}.L"), vec![a, r]));
                    plan.push(ParamShape::new(format!("lora.{name}.R"), vec![r, b]));
                }
            }
            Method::Adapter => {
                for prefix in adapter_prefixes("adapter", self, config) {
                    plan.push(ParamShape::new(format!("{prefix}.down.w"), vec![d, r]));
                    plan.push(ParamShape::new(format!("{prefix}.down.b"), vec![r]));
                    plan.push(ParamShape::new(format!("{prefix}.up.w"), vec![r, d]));
                    plan.push(ParamShape::new(format!("{prefix}.up.b"), vec![d]));
                }
            }
            Method::Compacter => {
                let (n, k) = (self.n, self.k);
                for j in 0..n {
                    plan.push(ParamShape::new(format!("compacter.shared_a.{j}"), vec![n, n]));
                }
                for prefix in adapter_prefixes("compacter", self, config) {
                    for (proj, a, b) in [("down", d, r), ("up", r, d)] {
                        for j in 0..n {
                            plan.push(ParamShape::new(format!("{prefix}.{proj}.s.{j}"), vec![a / n, k]));
                        }
                        for j in 0..n {
                            plan.push(ParamShape::new(format!("{prefix}.{proj}.t.{j}"), vec![k, b / n]));
                        }
                        plan.push(ParamShape::new(format!("{prefix}.{proj}.b"), vec![b]));
                    }
                }
            }
        }
        Ok(plan)
    }
}

fn sub_tag(s: Sublayer) -> &'static str {
    match s {
        Sublayer::Attention => "attn",
        Sublayer::Ffn => "ffn",
    }
}

fn adapter_prefix(kind: &str, layer: usize, sub: Sublayer) -> String {
    format!("{kind}.layer.{layer}.{}", sub_tag(sub))
}

fn adapter_prefixes(kind: &str, spec: &PeftSpec, config: &ModelConfig) -> Vec<String> {
    (0..config.n_layers)
        .flat_map(|i| spec.adapter_sublayers().iter().map(move |&s| adapter_prefix(kind, i, s)))
        .collect()
}

/// Base parameters that stay trainable under a method's policy: layer norms
/// for the adapter methods, nothing for LoRA.
pub fn base_trainable_patterns(method: Method) -> &'static [&'static str] {
    match method {
        Method::Lora => &[],
        Method::Adapter | Method::Compacter => &["layer.*.ln?.*", "ln_f.*"],
    }
}

/// Whether a θ parameter is a bias (everything else is a matrix factor).
pub fn is_bias(name: &str) -> bool {
    name.ends_with(".b")
}

fn init_theta(spec: &PeftSpec, p: &ParamShape, seed: u64) -> Tensor {
    let normal = |std: f64| {
        let mut r = rng::stream(seed, &format!("peft/{}", p.name));
        Tensor::new(p.shape.clone(), rng::normal_vec(&mut r, p.numel(), std)).expect("plan shape")
    };
    let zero = || Tensor::zeros(&p.shape);
    let name = p.name.as_str();
    match spec.method {
        Method::Lora if name.ends_with(".L") => normal(INIT_STD),
        Method::Lora => zero(),
        Method::Adapter if name.ends_with(".down.w") => normal(INIT_STD),
        Method::Adapter => zero(),
        Method::Compacter if name.contains(".shared_a.") => normal(1.0 / (spec.n as f64).sqrt()),
        Method::Compacter if name.contains(".up.t.") || is_bias(name) => zero(),
        Method::Compacter => normal(INIT_STD.sqrt()),
    }
}

/// Builds θ at its initial value θ₀ without touching a base model.
pub fn build_theta(config: &ModelConfig, spec: &PeftSpec, seed: u64) -> Result<ParamStore> {
    let mut theta = ParamStore::new();
    for p in spec.theta_plan(config)? {
        let mut value = init_theta(spec, &p, seed);
        value.round_to(config.dtype);
        theta.insert(Parameter::new(p.name, value, true))?;
    }
    Ok(theta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeftModel {
    pub base: Model,
    pub theta: ParamStore,
    pub spec: PeftSpec,
    /// Fingerprint of the base payload when θ was attached.
    pub base_fingerprint: u64,
}

/// Freezes the base, applies the method's layer-norm policy and attaches θ₀.
pub fn attach(model: Model, spec: &PeftSpec, seed: u64) -> Result<PeftModel> {
    model.config.validate()?;
    let theta = build_theta(&model.config, spec, seed)?;
    let base_fingerprint = fingerprint(&model.params, model.config.dtype);
    let mut base = model;
    base.params.freeze("*")?;
    for pattern in base_trainable_patterns(spec.method) {
        base.params.unfreeze(pattern)?;
    }
    Ok(PeftModel { base, theta, spec: spec.clone(), base_fingerprint })
}

fn require(method: Method, spec: &PeftSpec) -> Result<()> {
    if spec.method != method {
        return Err(config_err("method", format!("expected {method}, found {}", spec.method)));
    }
    Ok(())
}

pub fn attach_lora(model: Model, spec: &PeftSpec, seed: u64) -> Result<PeftModel> {
    require(Method::Lora, spec)?;
    attach(model, spec, seed)
}

pub fn attach_adapter(model: Model, spec: &PeftSpec, seed: u64) -> Result<PeftModel> {
    require(Method::Adapter, spec)?;
    attach(model, spec, seed)
}

pub fn attach_compacter(model: Model, spec: &PeftSpec, seed: u64) -> Result<PeftModel> {
    require(Method::Compacter, spec)?;
    attach(model, spec, seed)
}

/// `W_PT + L·R` for every LoRA target, as a plain model.
pub fn merge_lora(pm: &PeftModel) -> Result<Model> {
    if pm.spec.method != Method::Lora {
        return Err(Error::Method(format!(
            "merge is only defined for additive corrections; {} is not additive",
            pm.spec.method
        )));
    }
    let mut merged = pm.base.clone();
    for name in pm.spec.lora_targets(&pm.base.config) {
        let l = pm.theta.value(&format!("lora.{name}.L"))?;
        let r = pm.theta.value(&format!("lora.{name}.R"))?;
        let delta = ops::matmul(l, r)?;
        let w = merged.params.get_mut(&name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        w.value.add_assign(&delta)?;
        w.value.round_to(merged.config.dtype);
    }
    Ok(merged)
}

struct PeftHooks<'s> {
    spec: &'s PeftSpec,
    lora_targets: HashSet<String>,
}

impl<'s> PeftHooks<'s> {
    fn new(spec: &'s PeftSpec, config: &ModelConfig) -> Self {
        let lora_targets =
            if spec.method == Method::Lora { spec.lora_targets(config).into_iter().collect() } else { HashSet::new() };
        PeftHooks { spec, lora_targets }
    }

    fn lphm(&self, f: &mut Forward<'_>, prefix: &str, x: Var) -> Result<Var> {
        let n = self.spec.n;
        let bind = |f: &mut Forward<'_>, names: Vec<String>| -> Result<Vec<Var>> {
            names.iter().map(|name| f.param(name)).collect()
        };
        let a = bind(f, (0..n).map(|j| format!("compacter.shared_a.{j}")).collect())?;
        let s = bind(f, (0..n).map(|j| format!("{prefix}.s.{j}")).collect())?;
        let t = bind(f, (0..n).map(|j| format!("{prefix}.t.{j}")).collect())?;
        let y = f.tape.lphm(x, &a, &s, &t)?;
        let b = f.param(&format!("{prefix}.b"))?;
        f.tape.add(y, b)
    }
}

impl Hooks for PeftHooks<'_> {
    fn project(&self, f: &mut Forward<'_>, weight: &str, x: Var) -> Result<Var> {
        let y = f.linear(weight, x)?;
        if !self.lora_targets.contains(weight) {
            return Ok(y);
        }
        let down = f.linear(&format!("lora.{weight}.L"), x)?;
        let branch = f.linear(&format!("lora.{weight}.R"), down)?;
        f.tape.add(y, branch)
    }

    fn after_sublayer(&self, f: &mut Forward<'_>, layer: usize, sub: Sublayer, h: Var) -> Result<Var> {
        if self.spec.method == Method::Lora || !self.spec.adapter_sublayers().contains(&sub) {
            return Ok(h);
        }
        let up = if self.spec.method == Method::Adapter {
            let prefix = adapter_prefix("adapter", layer, sub);
            let z = f.affine(&format!("{prefix}.down.w"), &format!("{prefix}.down.b"), h)?;
            let z = f.tape.gelu(z)?;
            f.affine(&format!("{prefix}.up.w"), &format!("{prefix}.up.b"), z)?
        } else {
            let prefix = adapter_prefix("compacter", layer, sub);
            let z = self.lphm(f, &format!("{prefix}.down"), h)?;
            let z = f.tape.gelu(z)?;
            self.lphm(f, &format!("{prefix}.up"), z)?
        };
        f.tape.add(h, up)
    }
}

impl ParamAccess for PeftModel {
    fn param(&self, name: &str) -> Option<&Parameter> {
        self.theta.get(name).or_else(|| self.base.params.get(name))
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        if self.theta.contains(name) {
            self.theta.get_mut(name)
        } else {
            self.base.params.get_mut(name)
        }
    }

    fn trainable_names(&self) -> Vec<String> {
        let mut names = self.theta.trainable_names();
        names.extend(self.base.params.trainable_names());
        names
    }
}

impl Network for PeftModel {
    fn model_config(&self) -> &ModelConfig {
        &self.base.config
    }

    fn forward<'a>(&'a self, batch: &TokenBatch) -> Result<(Forward<'a>, Var)> {
        let hooks = PeftHooks::new(&self.spec, &self.base.config);
        transformer_forward(&self.base.config, vec![&self.theta, &self.base.params], &hooks, batch)
    }
}

/// Trainable-parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainableCount {
    /// All trainable parameters: θ plus any trainable base parameters.
    pub count: usize,
    /// `count / (base total + θ total)`.
    pub fraction: f64,
    pub theta: usize,
    /// θ without biases, i.e. only the matrix factors.
    pub theta_matrices: usize,
    /// Base parameters left trainable (layer norms under the adapter policy).
    pub base_trainable: usize,
    pub base_total: usize,
}

fn tally(base: &[(usize, bool)], theta: &[(String, usize, bool)]) -> TrainableCount {
    let base_total: usize = base.iter().map(|p| p.0).sum();
    let base_trainable: usize = base.iter().filter(|p| p.1).map(|p| p.0).sum();
    let theta_total: usize = theta.iter().map(|p| p.1).sum();
    let theta_trainable: usize = theta.iter().filter(|p| p.2).map(|p| p.1).sum();
    let theta_matrices = theta.iter().filter(|p| p.2 && !is_bias(&p.0)).map(|p| p.1).sum();
    let count = theta_trainable + base_trainable;
    TrainableCount {
        count,
        fraction: count as f64 / (base_total + theta_total) as f64,
        theta: theta_trainable,
        theta_matrices,
        base_trainable,
        base_total,
    }
}

/// Enumerates the trainable parameters of a plain model.
pub fn count_trainable_model(model: &Model) -> TrainableCount {
    let base: Vec<_> = model.params.iter().map(|p| (p.numel(), p.trainable)).collect();
    tally(&base, &[])
}

/// Enumerates the trainable parameters of an augmented model.
pub fn count_trainable(pm: &PeftModel) -> TrainableCount {
    let base: Vec<_> = pm.base.params.iter().map(|p| (p.numel(), p.trainable)).collect();
    let theta: Vec<_> = pm.theta.iter().map(|p| (p.name.clone(), p.numel(), p.trainable)).collect();
    tally(&base, &theta)
}

/// The same accounting from shapes alone, for models too large to build.
pub fn planned_count(config: &ModelConfig, spec: Option<&PeftSpec>) -> Result<TrainableCount> {
    config.validate()?;
    let Some(spec) = spec else {
        let base: Vec<_> = config.param_plan().iter().map(|p| (p.numel(), true)).collect();
        return Ok(tally(&base, &[]));
    };
    let patterns: Vec<_> = base_trainable_patterns(spec.method).iter().map(|p| crate::param::glob_regex(p)).collect();
    let base: Vec<_> =
        config.param_plan().iter().map(|p| (p.numel(), patterns.iter().any(|re| re.is_match(&p.name)))).collect();
    let theta: Vec<_> = spec
        .theta_plan(config)?
        .into_iter()
        .map(|p| {
            let n = p.numel();
            (p.name, n, true)
        })
        .collect();
    Ok(tally(&base, &theta))
}

/// Closed-form LPHM matrix parameter count over `adapters` adapter layers,
/// each with a `d→r` and an `r→d` LPHM: `L·2(d+r)k + n³`.
pub fn compacter_matrix_formula(adapters: usize, d: usize, r: usize, n: usize, k: usize) -> usize {
    adapters * 2 * (d + r) * k + n * n * n
}
