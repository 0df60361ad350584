//! Named parameter storage and per-pass binding into a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Backbone tensors live under this prefix and are frozen during adapter tuning.
pub const BACKBONE_PREFIX: &str = "enc.";
pub const ADAPTER_PREFIX: &str = "adapter.";
pub const DECODER_PREFIX: &str = "dec.";
/// Throwaway classifier used only while pretraining the backbone.
pub const PRETRAIN_HEAD_PREFIX: &str = "pretrain_head.";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) {
        for (k, v) in other.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    pub fn bitwise_eq_prefix(&self, other: &ParamStore, prefix: &str) -> bool {
        let a: Vec<_> = self.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        let b: Vec<_> = other.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        a.len() == b.len()
            && a
                .iter()
                .zip(&b)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bitwise_eq(vb))
    }

    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.bitwise_eq_prefix(other, "")
    }

    /// Max |Δ| over tensors under `prefix`; infinite when the name sets differ.
    pub fn linf_distance_prefix(&self, other: &ParamStore, prefix: &str) -> f64 {
        let mut worst = 0.0f64;
        for (k, v) in self.iter().filter(|(k, _)| k.starts_with(prefix)) {
            match other.tensors.get(k) {
                Some(o) if o.shape() == v.shape() => worst = worst.max(v.max_abs_diff(o)),
                _ => return f64::INFINITY,
            }
        }
        worst
    }
}

/// Which parameters receive gradients during a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// No gradients; pure inference.
    Inference,
    /// Everything except the backbone and the pretraining head.
    Adapters,
    /// Backbone plus pretraining head; used before freezing.
    Backbone,
    /// Every stored tensor.
    All,
}

impl GradMode {
    pub fn trains(&self, name: &str) -> bool {
        match self {
            GradMode::Inference => false,
            GradMode::Adapters => {
                name.starts_with(ADAPTER_PREFIX) || name.starts_with(DECODER_PREFIX)
            }
            GradMode::Backbone => {
                name.starts_with(BACKBONE_PREFIX) || name.starts_with(PRETRAIN_HEAD_PREFIX)
            }
            GradMode::All => true,
        }
    }
}

/// A forward pass in progress: a fresh graph plus lazily bound parameter leaves.
pub struct Fwd<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    mode: GradMode,
    bound: HashMap<String, Var>,
}

impl<'a> Fwd<'a> {
    pub fn new(store: &'a ParamStore, mode: GradMode) -> Self {
        Fwd {
            g: Graph::new(),
            store,
            mode,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf for the named parameter, created on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.g.leaf(t, self.mode.trains(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.bound.contains_key(name)
    }

    /// Gradients of every bound trainable parameter, sorted by name.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(String, Vec<f64>)> {
        let mut out: Vec<(String, Vec<f64>)> = self
            .bound
            .iter()
            .filter(|(name, _)| self.mode.trains(name))
            .filter_map(|(name, &v)| grads.get_slice(v).map(|g| (name.clone(), g.to_vec())))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Backpropagates from a scalar loss with seed 1.
    pub fn grads_of(&self, loss: Var) -> Result<Vec<(String, Vec<f64>)>> {
        let grads = self.g.backward(loss, &Tensor::scalar(1.0))?;
        Ok(self.param_grads(&grads))
    }

    /// `x · W + b` using `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.g"))?;
        let beta = self.p(&format!("{prefix}.b"))?;
        self.g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Glorot-uniform weights and zero bias for `{prefix}.w` / `{prefix}.b`.
pub fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    store.insert(
        format!("{prefix}.w"),
        Tensor::new(vec![fan_in, fan_out], w).expect("shape"),
    );
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_zero_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), Tensor::zeros(&[fan_in, fan_out]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[dim], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[dim]));
}

pub fn init_uniform(store: &mut ParamStore, rng: &mut impl Rng, name: &str, shape: &[usize], scale: f64) {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    store.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"));
}
