//! Parameters, forward sessions and the architectural blocks.

mod blocks;

pub use blocks::{
    adain, condition_channels, hard_swish, BatchNorm2d, BlockConfig, Conv2d, ConvKind, Linear, ResidualBlock,
    ResolutionChange, SqueezeExcite, ADAIN_EPS, BN_EPS,
};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Grads, Graph, ObservedStats, Var};
use crate::error::{contract, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Named tensors: trainable weights plus non-trainable buffers
/// (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter `{name}`");
        self.entries.push(Entry { name: name.to_string(), value, trainable });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).numel()).sum()
    }

    /// Same layout in another precision.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces values by name; every stored name must be supplied with a
    /// matching shape.
    pub fn load_named(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in tensors {
            let i = *self.index.get(&name).ok_or_else(|| contract(format!("unknown parameter `{name}`")))?;
            if t.shape() != self.entries[i].value.shape() {
                return Err(contract(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.entries[i].value.shape()
                )));
            }
            self.entries[i].value = t;
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(contract(format!("parameter `{}` missing", self.entries[i].name)));
        }
        Ok(())
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub(crate) fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        for u in updates {
            let momentum = T::of(u.momentum);
            let one = T::one();
            let unbias = if u.stats.count > 1 {
                T::of(u.stats.count as f64 / (u.stats.count - 1) as f64)
            } else {
                one
            };
            for (r, &m) in self.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = momentum * *r + (one - momentum) * m;
            }
            for (r, &v) in self.get_mut(u.running_var).data_mut().iter_mut().zip(&u.stats.var) {
                *r = momentum * *r + (one - momentum) * v * unbias;
            }
        }
    }
}

/// Registers parameters under a hierarchical name prefix with seeded init.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Float> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    /// Child builder with `name` appended to the prefix.
    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std.max(0.0)).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(self.rng))).collect();
        let full = self.full_name(name);
        self.store.add(&full, Tensor::from_vec(shape, data).expect("shape"), true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.add(&full, Tensor::full(shape, T::of(value)), true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.add(&full, Tensor::full(shape, T::of(value)), false)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are collected.
    Train,
    /// Running statistics in batch norm; nothing is collected.
    Eval,
}

#[derive(Clone, Debug)]
pub(crate) struct BnUpdate<T> {
    running_mean: ParamId,
    running_var: ParamId,
    momentum: f64,
    stats: ObservedStats<T>,
}

/// One forward pass: a fresh graph over an immutable parameter snapshot.
pub struct Session<'a, T: Float> {
    pub graph: Graph<T>,
    params: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    mode: Mode,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Float> Session<'a, T> {
    pub fn new(params: &'a ParamStore<T>, mode: Mode) -> Self {
        Self { graph: Graph::new(), params, vars: vec![None; params.len()], mode, bn_updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    /// Graph leaf for a stored tensor, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = if self.params.is_trainable(id) { self.graph.param(value) } else { self.graph.constant(value) };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    pub(crate) fn record_bn(&mut self, running_mean: ParamId, running_var: ParamId, momentum: f64, stats: ObservedStats<T>) {
        if self.mode == Mode::Train {
            self.bn_updates.push(BnUpdate { running_mean, running_var, momentum, stats });
        }
    }

    pub(crate) fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradients of every trainable parameter touched by this session.
    pub fn param_grads(&self, grads: &mut Grads<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let id = ParamId(i);
                if !self.params.is_trainable(id) {
                    return None;
                }
                v.and_then(|v| grads.take(v)).map(|g| (id, g))
            })
            .collect()
    }
}

/// Finishes a training session: applies the collected running statistics.
pub fn commit_bn_updates<T: Float>(store: &mut ParamStore<T>, session: &mut Session<'_, T>) {
    let updates = session.take_bn_updates();
    store.apply_bn_updates(&updates);
}
