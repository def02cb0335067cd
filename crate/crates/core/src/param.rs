//! Named parameters and ordered parameter stores.

use std::collections::BTreeMap;

use regex::Regex;

use crate::autodiff::{Gradients, PerExampleGradients};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Gradient of the last backward pass. Frozen parameters never get one.
    pub grad: Option<Tensor>,
    /// Per-example gradients of the last per-example pass, `[B] + shape`.
    pub per_example_grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        Parameter { name: name.into(), value, trainable, grad: None, per_example_grad: None }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Insertion-ordered map from name to [`Parameter`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

/// Translates a glob (`*` any run, `?` one character) into an anchored regex.
pub fn glob_regex(pattern: &str) -> Regex {
    let mut re = String::from("^");
    for c in pattern.chars() {
        match c {
            '*' => re.push_str(".*"),
            '?' => re.push('.'),
            c => re.push_str(&regex::escape(&c.to_string())),
        }
    }
    re.push('$');
    Regex::new(&re).expect("escaped glob is a valid regex")
}

/// Anything an optimizer can update by parameter name.
pub trait ParamAccess {
    fn param(&self, name: &str) -> Option<&Parameter>;
    fn param_mut(&mut self, name: &str) -> Option<&mut Parameter>;
    /// Names of trainable parameters in a fixed order.
    fn trainable_names(&self) -> Vec<String>;
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, p: Parameter) -> Result<()> {
        if self.index.contains_key(&p.name) {
            return Err(Error::State(format!("duplicate parameter name `{}`", p.name)));
        }
        self.index.insert(p.name.clone(), self.params.len());
        self.params.push(p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(Parameter::numel).sum()
    }

    fn set_trainable(&mut self, pattern: &str, trainable: bool) -> Result<usize> {
        let re = glob_regex(pattern);
        let mut hits = 0;
        for p in self.params.iter_mut().filter(|p| re.is_match(&p.name)) {
            p.trainable = trainable;
            if !trainable {
                p.grad = None;
                p.per_example_grad = None;
            }
            hits += 1;
        }
        if hits == 0 {
            return Err(Error::Selector(pattern.to_string()));
        }
        Ok(hits)
    }

    /// Marks every parameter matching the glob as frozen. Returns the number
    /// of matches.
    pub fn freeze(&mut self, pattern: &str) -> Result<usize> {
        self.set_trainable(pattern, false)
    }

    pub fn unfreeze(&mut self, pattern: &str) -> Result<usize> {
        self.set_trainable(pattern, true)
    }

    /// Stores gradients on the trainable parameters they belong to.
    pub fn load_grads(&mut self, grads: &Gradients) {
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            if let Some(g) = grads.get(&p.name) {
                p.grad = Some(g.clone());
            }
        }
    }

    /// Stores per-example gradients and their sum on trainable parameters.
    pub fn load_per_example(&mut self, per: &PerExampleGradients) {
        let summed = per.summed();
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            if let Some(g) = per.get(&p.name) {
                p.per_example_grad = Some(g.clone());
                p.grad = summed.get(&p.name).cloned();
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
            p.per_example_grad = None;
        }
    }
}

impl ParamAccess for ParamStore {
    fn param(&self, name: &str) -> Option<&Parameter> {
        self.get(name)
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.get_mut(name)
    }

    fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect()
    }
}
