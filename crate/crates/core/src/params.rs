//! Named parameter storage and its binding onto a tape.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::Entry;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameters keyed by dotted name; iteration order is lexicographic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// Per-parameter seed so a parameter's initial value depends only on
/// the run seed and its own name.
pub fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn normal(&mut self, seed: u64, name: &str, shape: &[usize], std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
        let dist = Normal::new(0.0, std).expect("positive std");
        self.insert(name, Tensor::from_fn(shape, |_| dist.sample(&mut rng)));
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::full(shape, 1.0));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total scalar count, optionally restricted to names with a prefix.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn numel(&self) -> usize {
        self.numel_with_prefix("")
    }

    pub fn to_entries(&self, prefix: &str) -> Vec<Entry> {
        self.params
            .iter()
            .map(|(k, v)| Entry::tensor(format!("{prefix}{k}"), v))
            .collect()
    }

    /// Collects every `f64` entry whose name starts with `prefix`.
    pub fn from_entries(entries: &[Entry], prefix: &str) -> Result<Self> {
        let mut store = ParamStore::new();
        for e in entries {
            if let Some(name) = e.name.strip_prefix(prefix) {
                store.insert(name, e.to_tensor()?);
            }
        }
        Ok(store)
    }
}

/// A tape plus lazily bound parameter leaves. Each parameter is bound once
/// per graph, so every use of a shared parameter feeds the same leaf.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: BTreeMap<&'s str, Var>,
    trainable: bool,
}

impl<'s> Graph<'s> {
    /// Graph whose parameters receive gradients.
    pub fn train(store: &'s ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            trainable: true,
        }
    }

    /// Graph for inference; parameters are constants.
    pub fn eval(store: &'s ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            trainable: false,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let (key, value) = self
            .store
            .params
            .get_key_value(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
        let v = self.tape.leaf(value.clone(), self.trainable);
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Names of parameters the forward pass actually touched.
    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().copied()
    }

    /// Gradients in store order; parameters without a gradient are absent.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| self.tape.grad(v).map(|g| (name.to_string(), g)))
            .collect()
    }
}
