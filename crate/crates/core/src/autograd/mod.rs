//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a reference-counted node. Operations on vars that require
//! gradients record their parents and a backward rule; operations on
//! constants record nothing, so inference-only forward passes free every
//! intermediate as soon as it goes out of scope.
//!
//! Node ids are drawn from a per-thread counter, so every node's id exceeds
//! the ids of its parents and sorting reachable nodes by id yields a
//! topological order.

mod gradcheck;
mod nn;
mod ops;

pub use gradcheck::{faulty_square_sum, grad_check, GradCheckReport};
pub use ops::{inject_backward_fault, Activation};
pub use nn::conv_padding;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Maps the output gradient to one gradient per parent.
///
/// Arguments: output gradient, parent values, output value.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct OpRecord<T: Real> {
    name: &'static str,
    parents: Vec<Var<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Real> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    grad: RefCell<Option<Tensor<T>>>,
    op: Option<OpRecord<T>>,
}

/// A value in a computation, optionally tracked for gradients.
#[derive(Clone)]
pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.0.op.as_ref().map(|o| o.name))
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Var<T> {
    fn from_node(value: Tensor<T>, requires_grad: bool, op: Option<OpRecord<T>>) -> Self {
        Self(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::from_node(value, false, None)
    }

    /// A trainable leaf. Gradients accumulate into it on every backward pass.
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::from_node(value, true, None)
    }

    pub(crate) fn tracking(parents: &[&Var<T>]) -> bool {
        parents.iter().any(|p| p.requires_grad())
    }

    /// Records an operation. When no parent requires gradients the record
    /// (and the closure with anything it captured) is dropped immediately.
    pub(crate) fn from_op(
        name: &'static str,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: BackwardFn<T>,
    ) -> Self {
        if Self::tracking(parents) {
            let op = OpRecord {
                name,
                parents: parents.iter().map(|&p| p.clone()).collect(),
                backward,
            };
            Self::from_node(value, true, Some(op))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|o| o.name)
    }

    /// Gradient accumulated into this leaf, if any.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Backpropagates from this scalar into every reachable trainable leaf.
    pub fn backward(&self) -> Result<()> {
        CompGraph::new(self).backward()
    }
}

/// The gradient-tracked part of a computation reachable from one root.
pub struct CompGraph<T: Real> {
    /// Parents precede children; the root is last.
    order: Vec<Var<T>>,
}

impl<T: Real> CompGraph<T> {
    pub fn new(root: &Var<T>) -> Self {
        let mut seen = HashSet::new();
        let mut order = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || !seen.insert(v.0.id) {
                continue;
            }
            if let Some(op) = &v.0.op {
                stack.extend(op.parents.iter().cloned());
            }
            order.push(v);
        }
        order.sort_by_key(|v| v.0.id);
        Self { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Operation names in topological order (leaves report `"leaf"`).
    pub fn op_names(&self) -> Vec<&'static str> {
        self.order
            .iter()
            .map(|v| v.op_name().unwrap_or("leaf"))
            .collect()
    }

    pub fn backward(&self) -> Result<()> {
        let Some(root) = self.order.last() else {
            return Ok(());
        };
        if root.value().numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
        grads.insert(root.0.id, Tensor::ones(root.shape().to_vec()));

        for node in self.order.iter().rev() {
            let Some(g) = grads.remove(&node.0.id) else {
                continue;
            };
            match &node.0.op {
                Some(op) => {
                    let parent_vals: Vec<&Tensor<T>> =
                        op.parents.iter().map(|p| p.value()).collect();
                    let pgrads = (op.backward)(&g, &parent_vals, node.value());
                    debug_assert_eq!(pgrads.len(), op.parents.len(), "{}", op.name);
                    for (parent, pg) in op.parents.iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), parent.shape(), "{}", op.name);
                        match grads.get_mut(&parent.0.id) {
                            Some(acc) => acc.add_assign(&pg),
                            None => {
                                grads.insert(parent.0.id, pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&g),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}
