use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use crate::Tensor;

/// Computes parent gradients from the output gradient. The mask flags which
/// parents actually need a gradient; entries for the others may be `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Records a computation so it can be differentiated in reverse.
///
/// A graph built with [`Graph::meta`] only propagates shapes; it is used for
/// structural accounting (multiply-accumulate counts) of large models without
/// touching their weights.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    meta: bool,
    scope: RefCell<String>,
    macs: RefCell<BTreeMap<String, u64>>,
    grad_enabled: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::build(false)
    }

    pub fn meta() -> Self {
        Self::build(true)
    }

    fn build(meta: bool) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            meta,
            scope: RefCell::new(String::new()),
            macs: RefCell::new(BTreeMap::new()),
            grad_enabled: Cell::new(true),
        }
    }

    pub fn is_meta(&self) -> bool {
        self.meta
    }

    /// Disables gradient recording for every op added afterwards (inference).
    pub fn set_grad_enabled(&self, enabled: bool) {
        self.grad_enabled.set(enabled);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Vec::new(), None, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Vec::new(), None, false)
    }

    /// Names the module that subsequent multiply-accumulates are charged to.
    pub fn set_scope(&self, scope: &str) {
        *self.scope.borrow_mut() = scope.to_string();
    }

    pub fn scope(&self) -> String {
        self.scope.borrow().clone()
    }

    pub(crate) fn add_macs(&self, n: u64) {
        let scope = self.scope.borrow().clone();
        *self.macs.borrow_mut().entry(scope).or_insert(0) += n;
    }

    /// Multiply-accumulate operations executed so far, keyed by scope.
    pub fn macs_by_scope(&self) -> BTreeMap<String, u64> {
        self.macs.borrow().clone()
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.borrow().values().sum()
    }

    fn insert(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), parents, backward, requires_grad });
        Var { id, graph: self }
    }

    /// Adds an op node. `backward` is dropped when no parent needs a gradient.
    pub(crate) fn push<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = self.grad_enabled.get() && {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward: Option<BackwardFn> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.insert(value, ids, backward, requires_grad)
    }

    pub(crate) fn push_meta(&self, shape: Vec<usize>, parents: &[Var<'_>]) -> Var<'_> {
        let ids = parents.iter().map(|p| p.id).collect();
        self.insert(Tensor::meta(shape), ids, None, false)
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        assert!(!self.meta, "backward is not available on a meta graph");
        assert_eq!(output.value().numel(), 1, "backward needs a scalar output");
        let n = self.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut out = BTreeMap::new();
        grads[output.id] = Some(Tensor::ones(output.value().shape().to_vec()));

        for id in (0..=output.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let nodes = self.nodes.borrow();
            let node = &nodes[id];
            if node.parents.is_empty() {
                if node.requires_grad {
                    out.insert(id, grad);
                }
                continue;
            }
            let Some(backward) = node.backward.as_ref() else { continue };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), needed) in node.parents.iter().zip(parent_grads).zip(mask) {
                let (Some(g), true) = (g, needed) else { continue };
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[p] = Some(g),
                }
            }
        }
        Gradients { grads: out }
    }
}

/// Gradients of leaves created with [`Graph::param`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.remove(&var.id)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) id: usize,
    pub(crate) graph: &'g Graph,
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        self.value().dims4()
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    pub fn id(&self) -> usize {
        self.id
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}
