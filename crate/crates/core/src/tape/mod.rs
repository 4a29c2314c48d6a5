//! Reverse-mode autodiff over small dense tensors.
//!
//! Each [`Tensor`] wraps a reference-counted graph node holding a value, its
//! parents and a backward closure. Calling [`Tensor::backward`] on a scalar
//! loss walks the graph in reverse topological order and returns a
//! [`GradStore`] with one gradient per reachable trainable leaf.
//!
//! Two properties matter beyond plain differentiation:
//!
//! - [`Tensor::detach`] is the stop-gradient operator: it forwards the value
//!   and drops the subgraph behind it, so detached denoiser computations are
//!   freed immediately and never contribute gradient.
//! - nodes created inside a [`instrument::DenoiserScope`] are tagged, so
//!   [`graph_stats`] can report how many denoiser computations stayed
//!   attached to a loss and how many of their activation elements are still
//!   resident. That count is the contract the gateway mechanism is tested
//!   against.

pub mod instrument;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use instrument::{no_grad, CallCounts, DenoiserScope};

enum NodeKind {
    /// Trainable leaf; `active` gates whether gradients flow into it.
    Var { active: Cell<bool> },
    Constant,
    Op { requires_grad: bool },
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

pub(crate) struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    value: RefCell<Vec<T>>,
    parents: Vec<Rc<Node<T>>>,
    backward: Option<BackwardFn<T>>,
    kind: NodeKind,
    scope: Option<u64>,
}

/// Context handed to backward closures.
pub(crate) struct BackwardCtx<'a, T: Scalar> {
    pub grad: &'a [T],
    pub out: &'a [T],
    pub parents: &'a [Rc<Node<T>>],
}

impl<'a, T: Scalar> BackwardCtx<'a, T> {
    /// Borrow the value of parent `i`.
    pub fn pval(&self, i: usize) -> std::cell::Ref<'a, Vec<T>> {
        self.parents[i].value.borrow()
    }

}

impl<T: Scalar> Node<T> {
    fn requires_grad(&self) -> bool {
        match &self.kind {
            NodeKind::Var { active } => active.get(),
            NodeKind::Constant => false,
            NodeKind::Op { requires_grad } => *requires_grad,
        }
    }

    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl<T: Scalar> Drop for Node<T> {
    fn drop(&mut self) {
        if self.scope.is_some() {
            instrument::scoped_free(self.numel());
        }
        // Iterative teardown: long op chains (unrolled sampling loops) would
        // otherwise overflow the stack through recursive Rc drops.
        let mut work: Vec<Rc<Node<T>>> = self.parents.drain(..).collect();
        while let Some(rc) = work.pop() {
            if let Some(node) = Rc::into_inner(rc) {
                // `node` is dropped at end of scope with empty parents, so
                // its own Drop cannot recurse.
                let mut node = node;
                work.extend(node.parents.drain(..));
            }
        }
    }
}

/// A value plus (optionally) the computation that produced it.
pub struct Tensor<T: Scalar> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    fn make(shape: Vec<usize>, value: Vec<T>, kind: NodeKind) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let scope = instrument::current_scope();
        if scope.is_some() {
            instrument::scoped_alloc(value.len());
        }
        Tensor {
            node: Rc::new(Node {
                id: instrument::next_node_id(),
                shape,
                value: RefCell::new(value),
                parents: Vec::new(),
                backward: None,
                kind,
                scope,
            }),
        }
    }

    /// Trainable leaf.
    pub fn var(shape: &[usize], value: Vec<T>) -> Self {
        Self::make(
            shape.to_vec(),
            value,
            NodeKind::Var {
                active: Cell::new(true),
            },
        )
    }

    pub fn constant(shape: &[usize], value: Vec<T>) -> Self {
        Self::make(shape.to_vec(), value, NodeKind::Constant)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::constant(shape, vec![T::zero(); n])
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(&[1], vec![v])
    }

    /// Internal op-node constructor. Falls back to a plain constant when
    /// gradients are disabled or no parent carries gradient, which frees the
    /// upstream graph as soon as local handles drop.
    pub(crate) fn op(
        shape: Vec<usize>,
        value: Vec<T>,
        parents: Vec<&Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = instrument::grad_enabled() && parents.iter().any(|p| p.node.requires_grad());
        if !track {
            return Self::make(shape, value, NodeKind::Constant);
        }
        let scope = instrument::current_scope();
        if scope.is_some() {
            instrument::scoped_alloc(value.len());
        }
        Tensor {
            node: Rc::new(Node {
                id: instrument::next_node_id(),
                shape,
                value: RefCell::new(value),
                parents: parents.iter().map(|p| Rc::clone(&p.node)).collect(),
                backward: Some(backward),
                kind: NodeKind::Op {
                    requires_grad: true,
                },
                scope,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.numel()
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<T>> {
        self.node.value.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.value.borrow().clone()
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.node.value.borrow()[0]
    }

    pub fn is_leaf(&self) -> bool {
        self.node.parents.is_empty() && self.node.backward.is_none()
    }

    pub fn is_var(&self) -> bool {
        matches!(self.node.kind, NodeKind::Var { .. })
    }

    /// Gate gradient flow into a trainable leaf.
    pub fn set_trainable(&self, trainable: bool) {
        if let NodeKind::Var { active } = &self.node.kind {
            active.set(trainable);
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(&self.node.kind, NodeKind::Var { active } if active.get())
    }

    pub fn all_finite(&self) -> bool {
        self.node.value.borrow().iter().all(|v| v.is_finite())
    }

    /// In-place update of a leaf's value (optimizer steps, FD probes).
    pub fn update_data(&self, f: impl FnOnce(&mut Vec<T>)) {
        assert!(self.is_leaf(), "only leaf tensors may be updated in place");
        f(&mut self.node.value.borrow_mut());
    }

    /// Stop-gradient: same value, no history.
    pub fn detach(&self) -> Self {
        Self::constant(&self.node.shape.clone(), self.to_vec())
    }

    /// Reverse-mode sweep from a scalar loss. Returns gradients for every
    /// reachable active leaf; anything unreachable is implicitly zero.
    pub fn backward(&self) -> Result<GradStore<T>> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let mut store = GradStore::new();
        if !self.node.requires_grad() {
            return Ok(store);
        }
        let order = reverse_topo(&self.node);
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.node.id, vec![T::one()]);
        for node in order {
            let Some(backward) = &node.backward else {
                // Leaf: keep its accumulated gradient.
                if node.requires_grad() {
                    if let Some(g) = grads.remove(&node.id) {
                        store.grads.insert(node.id, g);
                    }
                }
                continue;
            };
            let Some(grad) = grads.remove(&node.id) else {
                continue;
            };
            let parent_grads = {
                let out = node.value.borrow();
                let ctx = BackwardCtx {
                    grad: &grad,
                    out: &out,
                    parents: &node.parents,
                };
                backward(&ctx)
            };
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if !parent.requires_grad() {
                    continue;
                }
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.len(), parent.numel());
                match grads.entry(parent.id) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        for (a, b) in e.get_mut().iter_mut().zip(&pg) {
                            *a += *b;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(pg);
                    }
                }
            }
        }
        Ok(store)
    }
}

/// Reverse topological order (loss first, leaves last), pruned to the
/// gradient-carrying subgraph.
fn reverse_topo<T: Scalar>(root: &Rc<Node<T>>) -> Vec<Rc<Node<T>>> {
    let mut visited = std::collections::HashSet::new();
    let mut order: Vec<Rc<Node<T>>> = Vec::new();
    let mut stack: Vec<(Rc<Node<T>>, usize)> = vec![(Rc::clone(root), 0)];
    visited.insert(root.id);
    while let Some((node, idx)) = stack.last_mut() {
        if *idx < node.parents.len() {
            let parent = Rc::clone(&node.parents[*idx]);
            *idx += 1;
            if parent.requires_grad() && !visited.contains(&parent.id) {
                visited.insert(parent.id);
                stack.push((parent, 0));
            }
        } else {
            order.push(Rc::clone(node));
            stack.pop();
        }
    }
    order.reverse();
    order
}

/// Gradients keyed by leaf tensor identity.
pub struct GradStore<T: Scalar> {
    grads: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn new() -> Self {
        GradStore {
            grads: HashMap::new(),
        }
    }

    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient of `t`, densified: unreachable leaves are zero.
    pub fn get_or_zeros(&self, t: &Tensor<T>) -> Vec<T> {
        self.grads
            .get(&t.id())
            .cloned()
            .unwrap_or_else(|| vec![T::zero(); t.numel()])
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Scalar> Default for GradStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// What is still attached to a tensor's history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphStats {
    /// Total graph nodes reachable from the tensor.
    pub nodes: usize,
    /// Total value elements held by those nodes.
    pub elements: usize,
    /// Distinct denoiser computations whose graph is still attached.
    pub retained_denoiser_graphs: usize,
    /// Value elements belonging to those denoiser computations.
    pub retained_denoiser_elements: usize,
}

/// Traverse a tensor's full history (gradient-carrying or not) and report
/// retention statistics.
pub fn graph_stats<T: Scalar>(t: &Tensor<T>) -> GraphStats {
    let mut visited = std::collections::HashSet::new();
    let mut scopes = std::collections::HashSet::new();
    let mut stats = GraphStats {
        nodes: 0,
        elements: 0,
        retained_denoiser_graphs: 0,
        retained_denoiser_elements: 0,
    };
    let mut stack: Vec<Rc<Node<T>>> = vec![Rc::clone(&t.node)];
    visited.insert(t.node.id);
    while let Some(node) = stack.pop() {
        stats.nodes += 1;
        let n = node.numel();
        stats.elements += n;
        if let Some(scope) = node.scope {
            scopes.insert(scope);
            stats.retained_denoiser_elements += n;
        }
        for parent in &node.parents {
            if visited.insert(parent.id) {
                stack.push(Rc::clone(parent));
            }
        }
    }
    stats.retained_denoiser_graphs = scopes.len();
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn add_mul_gradients() {
        let x = Tensor::<f64>::var(&[2], vec![3.0, -1.0]);
        let y = Tensor::<f64>::var(&[2], vec![2.0, 5.0]);
        // L = sum(x * y + x)
        let loss = x.mul(&y).unwrap().add(&x).unwrap().sum();
        let grads = loss.backward().unwrap();
        let gx = grads.get(&x).unwrap();
        let gy = grads.get(&y).unwrap();
        assert_eq!(gx, &[3.0, 6.0]); // y + 1
        assert_eq!(gy, &[3.0, -1.0]); // x
    }

    #[test]
    fn detach_blocks_gradient_and_frees_history() {
        let x = Tensor::<f64>::var(&[2], vec![1.0, 2.0]);
        let through = x.mul_scalar(3.0);
        let blocked = through.detach();
        assert_eq!(blocked.to_vec(), vec![3.0, 6.0]);
        let loss = blocked.sum();
        let grads = loss.backward().unwrap();
        assert!(grads.get(&x).is_none());
        assert!(blocked.is_leaf());
    }

    #[test]
    fn inactive_var_behaves_like_constant() {
        let x = Tensor::<f64>::var(&[1], vec![2.0]);
        x.set_trainable(false);
        let loss = x.mul_scalar(5.0).sum();
        let grads = loss.backward().unwrap();
        assert!(grads.is_empty());
        x.set_trainable(true);
        let loss = x.mul_scalar(5.0).sum();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[5.0]);
    }

    #[test]
    fn no_grad_produces_leaves() {
        let x = Tensor::<f64>::var(&[1], vec![2.0]);
        let y = no_grad(|| x.mul_scalar(2.0));
        assert!(y.is_leaf());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x = Tensor::<f64>::var(&[1], vec![4.0]);
        let y = x.mul_scalar(2.0);
        // L = y*y  => dL/dx = 2*y*2 = 8x = 32... via both paths
        let loss = y.mul(&y).unwrap().sum();
        let grads = loss.backward().unwrap();
        assert_close(grads.get(&x).unwrap()[0], 2.0 * 8.0 * 2.0, 1e-12);
    }

    #[test]
    fn deep_chain_drop_does_not_overflow() {
        let mut t = Tensor::<f64>::var(&[1], vec![1.0]);
        for _ in 0..200_000 {
            t = t.mul_scalar(1.0);
        }
        drop(t); // must not blow the stack
    }

    #[test]
    fn scope_tagging_and_stats() {
        let x = Tensor::<f64>::var(&[4], vec![1.0; 4]);
        let kept = {
            let _scope = DenoiserScope::enter();
            x.mul_scalar(2.0).add(&x).unwrap()
        };
        let dropped = {
            let _scope = DenoiserScope::enter();
            x.mul_scalar(3.0)
        }
        .detach();
        let out = kept.add(&dropped).unwrap().sum();
        let stats = graph_stats(&out);
        assert_eq!(stats.retained_denoiser_graphs, 1);
        assert_eq!(stats.retained_denoiser_elements, 8);
    }

    #[test]
    fn peak_gauge_tracks_scoped_allocations() {
        instrument::reset_peak_scoped_elements();
        let base = instrument::live_scoped_elements();
        {
            let _scope = DenoiserScope::enter();
            let a = Tensor::<f64>::constant(&[10], vec![0.0; 10]);
            let _b = a.mul_scalar(1.0);
            assert_eq!(instrument::live_scoped_elements(), base + 20);
        }
        assert_eq!(instrument::live_scoped_elements(), base);
        assert!(instrument::peak_scoped_elements() >= base + 20);
    }
}
