//! Reverse-mode tape over whole tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s during a
//! forward pass; [`Graph::backward`] replays the tape in reverse and
//! accumulates gradients into every node that has a `requires_grad`
//! leaf among its ancestors. Nodes are appended in creation order, so
//! reverse index order is a valid topological order.
//!
//! The tape is single-threaded by design (operators may parallelize
//! internally over their own data). Gradient contracts are enforced by
//! the finite-difference checker in [`super::gradcheck`], not by
//! construction.

use std::cell::RefCell;
use std::rc::Rc;

use super::{Scalar, Tensor};

/// One recorded operation: given the gradient of the loss w.r.t. this
/// op's output, accumulate gradients into the op's parents.
pub trait TapeOp<T: Scalar> {
    fn backward(&self, vals: &Values<'_, T>, out_idx: usize, grad_out: &Tensor<T>, sink: &mut Sink<'_, T>);
}

/// Read access to every node value recorded so far.
pub struct Values<'a, T>(&'a [Tensor<T>]);

impl<'a, T: Scalar> Values<'a, T> {
    pub fn get(&self, idx: usize) -> &'a Tensor<T> {
        &self.0[idx]
    }
}

/// Write access to per-node gradient accumulators.
pub struct Sink<'a, T: Scalar> {
    needs: &'a [bool],
    grads: &'a mut [Option<Tensor<T>>],
}

impl<'a, T: Scalar> Sink<'a, T> {
    /// Whether any ancestor of `idx` requires gradients. Ops should
    /// skip the work for parents that report `false`.
    pub fn needs(&self, idx: usize) -> bool {
        self.needs[idx]
    }

    /// Mutable accumulator for node `idx`, created zeroed on first use.
    /// Returns `None` when the node does not participate in gradients.
    pub fn slot(&mut self, idx: usize, shape: &[usize]) -> Option<&mut [T]> {
        if !self.needs[idx] {
            return None;
        }
        if self.grads[idx].is_none() {
            self.grads[idx] = Some(Tensor::zeros(shape));
        }
        Some(self.grads[idx].as_mut().unwrap().data_mut())
    }

    /// Adds a whole tensor into the accumulator for node `idx`.
    pub fn accum(&mut self, idx: usize, delta: &Tensor<T>) {
        if let Some(slot) = self.slot(idx, delta.shape()) {
            for (s, d) in slot.iter_mut().zip(delta.data()) {
                *s += *d;
            }
        }
    }
}

struct GraphInner<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<Option<Box<dyn TapeOp<T>>>>,
    needs_grad: Vec<bool>,
}

/// Recording tape. Cheap to clone (shared handle).
pub struct Graph<T: Scalar> {
    inner: Rc<RefCell<GraphInner<T>>>,
}

impl<T: Scalar> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(GraphInner {
                values: Vec::new(),
                ops: Vec::new(),
                needs_grad: Vec::new(),
            })),
        }
    }

    /// Records a leaf node. Its `requires_grad` flag decides whether
    /// gradients are tracked through it.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        let needs = value.requires_grad();
        self.push_node(value, None, needs)
    }

    /// Records a constant leaf (no gradient tracking).
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.push_node(value, None, false)
    }

    /// Records an op output. `parents` are the node ids the op reads in
    /// `backward`; gradient participation is inherited from them.
    pub fn push(&self, value: Tensor<T>, op: Box<dyn TapeOp<T>>, parents: &[usize]) -> Var<T> {
        let needs = {
            let inner = self.inner.borrow();
            parents.iter().any(|&p| inner.needs_grad[p])
        };
        self.push_node(value, Some(op), needs)
    }

    fn push_node(&self, value: Tensor<T>, op: Option<Box<dyn TapeOp<T>>>, needs: bool) -> Var<T> {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.values.len();
        inner.values.push(value);
        inner.ops.push(op);
        inner.needs_grad.push(needs);
        Var {
            graph: self.clone(),
            idx,
        }
    }

    pub fn same_graph(&self, other: &Graph<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Runs `f` with read access to a node's value without cloning it.
    pub fn with_value<R>(&self, idx: usize, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        let inner = self.inner.borrow();
        f(&inner.values[idx])
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().values.len()
    }

    /// Backpropagates from `root`, seeding its gradient with ones
    /// (sum-of-outputs semantics; losses are scalars in practice).
    pub fn backward(&self, root: &Var<T>) -> Grads<T> {
        assert!(self.same_graph(&root.graph), "backward root from another graph");
        let inner = self.inner.borrow();
        let n_nodes = inner.values.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n_nodes).map(|_| None).collect();
        grads[root.idx] = Some(Tensor::full(inner.values[root.idx].shape(), T::ONE));

        for i in (0..=root.idx).rev() {
            if inner.ops[i].is_none() || !inner.needs_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            {
                let vals = Values(&inner.values);
                let mut sink = Sink {
                    needs: &inner.needs_grad,
                    grads: &mut grads,
                };
                inner.ops[i].as_ref().unwrap().backward(&vals, i, &g, &mut sink);
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }
}

/// Handle to a node on a [`Graph`].
pub struct Var<T: Scalar> {
    graph: Graph<T>,
    idx: usize,
}

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            graph: self.graph.clone(),
            idx: self.idx,
        }
    }
}

impl<T: Scalar> Var<T> {
    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn idx(&self) -> usize {
        self.idx
    }

    /// Clones the node's value out of the tape.
    pub fn value(&self) -> Tensor<T> {
        self.graph.with_value(self.idx, |t| t.clone())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.with_value(self.idx, |t| t.shape().to_vec())
    }

    /// Extracts a single-element value; panics if the node is not a
    /// one-element tensor.
    pub fn item(&self) -> T {
        self.graph.with_value(self.idx, |t| {
            assert_eq!(t.len(), 1, "item() on non-scalar node");
            t.data()[0]
        })
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient w.r.t. `var`, if it participated in the computation.
    pub fn wrt(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(var.idx).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.idx).and_then(|g| g.take())
    }
}
