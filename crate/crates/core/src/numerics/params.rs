use std::collections::{BTreeMap, HashMap};
use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Checkpoint, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Named model weights in deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    frozen: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing weight {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing weight {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all weights.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Excludes every weight whose name starts with `prefix` from gradients.
    pub fn freeze(&mut self, prefix: &str) {
        if !self.frozen.iter().any(|p| p == prefix) {
            self.frozen.push(prefix.to_string());
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn init_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.insert(name, t);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }

    /// Linear layer `name.w[inp×out]`, `name.b[out]` with fan-in scaled init.
    pub fn init_linear<R: Rng>(
        &mut self,
        name: &str,
        inp: usize,
        out: usize,
        std: f64,
        rng: &mut R,
    ) {
        self.init_normal(&format!("{name}.w"), &[inp, out], std, rng);
        self.init_const(&format!("{name}.b"), &[out], 0.0);
    }

    pub fn init_layer_norm(&mut self, name: &str, n: usize) {
        self.init_const(&format!("{name}.g"), &[n], 1.0);
        self.init_const(&format!("{name}.b"), &[n], 0.0);
    }

    pub fn init_conv<R: Rng>(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        std: f64,
        rng: &mut R,
    ) {
        self.init_normal(&format!("{name}.w"), &[cout, cin, k, k], std, rng);
        self.init_const(&format!("{name}.b"), &[cout], 0.0);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.clone().with_requires_grad(false)))
                .collect(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        ParamStore {
            params: ck.tensors.clone(),
            frozen: Vec::new(),
        }
    }
}

/// A [`Tape`] bound to a [`ParamStore`]. Each weight is recorded once per
/// graph; frozen weights enter as constants.
pub struct Graph<'p> {
    tape: Tape,
    params: &'p ParamStore,
    vars: HashMap<String, Var>,
    track_params: bool,
}

impl<'p> Deref for Graph<'p> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl<'p> DerefMut for Graph<'p> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

impl<'p> Graph<'p> {
    /// Graph whose non-frozen weights receive gradients.
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            vars: HashMap::new(),
            track_params: true,
        }
    }

    /// Graph for pure inference: no weight gradients are tracked.
    pub fn inference(params: &'p ParamStore) -> Self {
        Graph {
            track_params: false,
            ..Graph::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let trainable = self.track_params && !self.params.is_frozen(name);
        let v = self.tape.leaf(t.with_requires_grad(trainable));
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Weight gradients after `backward`, keyed by name.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| self.tape.grad(v).map(|g| (name.clone(), g.to_vec())))
            .filter(|(name, _)| self.track_params && !self.params.is_frozen(name))
            .collect()
    }

    /// `x[m×in] · name.w + name.b`.
    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    pub fn layer_norm_named(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.param(&format!("{name}.g"))?;
        let b = self.param(&format!("{name}.b"))?;
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn conv_named(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        self.tape.conv2d(x, w, b, stride, pad)
    }

    /// Single-head scaled dot-product attention; returns `(output, weights)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let d = *self.tape.shape(q).last().unwrap_or(&1);
        let kt = self.tape.transpose(k);
        let logits = self.tape.matmul(q, kt)?;
        let logits = self.tape.scale(logits, 1.0 / (d as f64).sqrt());
        let weights = self.tape.softmax(logits)?;
        let out = self.tape.matmul(weights, v)?;
        Ok((out, weights))
    }
}
