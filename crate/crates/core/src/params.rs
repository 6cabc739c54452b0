//! Named parameter storage, deterministic initialization and the per-pass
//! forward context that turns stored tensors into graph leaves.

use std::cell::RefCell;
use std::collections::HashMap;

use bgnet_tensor::{BatchStats, Gradients, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BgError, Result};

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by the optimizer.
    Weight,
    /// Updated outside the optimizer (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Ordered collection of named tensors. Registration order is stable, so
/// iteration (and therefore initialization and serialization) is
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
    meta: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store that records shapes only; used for structural accounting.
    pub fn meta() -> Self {
        ParamStore { meta: true, ..Self::default() }
    }

    pub fn is_meta(&self) -> bool {
        self.meta
    }

    pub fn add(&mut self, name: &str, value: Tensor, kind: ParamKind) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.entries.push(ParamEntry { name: name.to_string(), value, kind });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Weight).map(|e| e.value.numel()).sum()
    }

    /// Trainable scalars grouped by the first segment of the parameter name.
    pub fn trainable_by_prefix(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for e in self.entries.iter().filter(|e| e.kind == ParamKind::Weight) {
            let prefix = e.name.split('.').next().unwrap_or_default().to_string();
            match groups.iter_mut().find(|(p, _)| *p == prefix) {
                Some((_, n)) => *n += e.value.numel(),
                None => groups.push((prefix, e.value.numel())),
            }
        }
        groups
    }

    /// Replaces values with those of `other` for every shared name.
    ///
    /// Shapes must agree; names present in only one store are ignored when
    /// `partial` is set and rejected otherwise.
    pub fn load_from(&mut self, other: &ParamStore, partial: bool) -> Result<usize> {
        let mut loaded = 0;
        for entry in &mut self.entries {
            match other.id(&entry.name) {
                Some(j) => {
                    let src = other.value(j);
                    if src.shape() != entry.value.shape() {
                        return Err(BgError::shape(format!(
                            "parameter {} has shape {:?}, archive holds {:?}",
                            entry.name,
                            entry.value.shape(),
                            src.shape()
                        )));
                    }
                    entry.value = src.clone();
                    loaded += 1;
                }
                None if partial => {}
                None => return Err(BgError::Decode(format!("archive is missing parameter {}", entry.name))),
            }
        }
        Ok(loaded)
    }
}

/// Registers parameters under a dotted name prefix and initializes them from
/// a seeded generator.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = self.qualify(name);
        Builder { store: &mut *self.store, rng: &mut *self.rng, prefix }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Weight drawn uniformly from `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let value = if self.store.is_meta() {
            Tensor::meta(shape.to_vec())
        } else {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect())
        };
        let name = self.qualify(name);
        self.store.add(&name, value, ParamKind::Weight)
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64, kind: ParamKind) -> ParamId {
        let t = if self.store.is_meta() { Tensor::meta(shape.to_vec()) } else { Tensor::full(shape.to_vec(), value) };
        let name = self.qualify(name);
        self.store.add(&name, t, kind)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// State of one forward pass: the graph, cached parameter leaves, the
/// train/eval switch and the batch statistics to fold into running buffers.
pub struct Ctx<'g> {
    pub graph: &'g Graph,
    store: &'g ParamStore,
    leaves: RefCell<Vec<Option<Var<'g>>>>,
    train: bool,
    check_finite: bool,
    bn_updates: RefCell<Vec<(ParamId, ParamId, BatchStats)>>,
}

impl<'g> Ctx<'g> {
    pub fn new(graph: &'g Graph, store: &'g ParamStore, train: bool) -> Self {
        Ctx {
            graph,
            store,
            leaves: RefCell::new(vec![None; store.len()]),
            train,
            check_finite: cfg!(debug_assertions) && !graph.is_meta(),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn with_finite_checks(mut self, enabled: bool) -> Self {
        self.check_finite = enabled && !self.graph.is_meta();
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'g ParamStore {
        self.store
    }

    /// Graph leaf for a stored parameter; weights are tracked, buffers are
    /// constants.
    pub fn param(&self, id: ParamId) -> Var<'g> {
        if let Some(v) = self.leaves.borrow()[id] {
            return v;
        }
        let entry = self.store.entry(id);
        let v = match entry.kind {
            ParamKind::Weight => self.graph.param(entry.value.clone()),
            ParamKind::Buffer => self.graph.constant(entry.value.clone()),
        };
        self.leaves.borrow_mut()[id] = Some(v);
        v
    }

    pub fn value(&self, id: ParamId) -> &'g Tensor {
        self.store.value(id)
    }

    pub(crate) fn record_batch_stats(&self, mean_id: ParamId, var_id: ParamId, stats: BatchStats) {
        self.bn_updates.borrow_mut().push((mean_id, var_id, stats));
    }

    /// Fails if `var` holds NaN or infinity and finiteness checks are on.
    pub fn ensure_finite(&self, var: Var<'g>, what: &str) -> Result<()> {
        if self.check_finite && !var.value().is_finite() {
            return Err(BgError::NonFinite(what.to_string()));
        }
        Ok(())
    }

    /// Gradients of every weight touched in this pass, keyed by id.
    pub fn weight_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Tensor)> {
        self.leaves
            .borrow()
            .iter()
            .enumerate()
            .filter(|(id, _)| self.store.entry(*id).kind == ParamKind::Weight)
            .filter_map(|(id, v)| v.and_then(|v| grads.take(v)).map(|g| (id, g)))
            .collect()
    }

    pub fn take_batch_stats(&self) -> Vec<(ParamId, ParamId, BatchStats)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}

/// Folds observed batch statistics into running estimates:
/// `running = (1 - momentum) * running + momentum * observed`.
pub fn apply_batch_stats(store: &mut ParamStore, updates: Vec<(ParamId, ParamId, BatchStats)>, momentum: f64) {
    for (mean_id, var_id, stats) in updates {
        for (r, o) in store.value_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * o;
        }
        for (r, o) in store.value_mut(var_id).data_mut().iter_mut().zip(&stats.var_unbiased) {
            *r = (1.0 - momentum) * *r + momentum * o;
        }
    }
}
