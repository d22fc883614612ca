//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every operation records a node on an implicit tape (the DAG of parent
//! links plus backward closures). Calling [`Tensor::backward`] on a scalar
//! walks the reachable subgraph once in reverse topological order and
//! accumulates gradients into every tensor that requires them. Gradients
//! accumulate across calls until explicitly zeroed.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

mod init;
mod ops;

pub use init::Initializer;
pub use ops::{batch_norm1d, BatchNormStats};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn = Box<dyn Fn(&Inner)>;

/// Graph node: value buffer, optional gradient, and the backward rule that
/// scatters this node's gradient into its parents.
pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

impl Inner {
    /// Gradient of this node, which the backward rule reads. Panics if the
    /// node has not received a gradient yet; backward order guarantees it has.
    pub(crate) fn grad_ref(&self) -> Ref<'_, Vec<f64>> {
        Ref::map(self.grad.borrow(), |g| {
            g.as_ref().expect("backward rule ran before gradient arrived")
        })
    }
}

/// A dense n-dimensional array of f64 in row-major order, cheap to clone
/// (shared handle) and participating in the gradient tape.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.inner.shape, self.inner.requires_grad
        )
    }
}

/// A named, trainable tensor. Names are unique within a model and models
/// enumerate their parameters in a deterministic order.
#[derive(Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter { name: name.into(), tensor }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

impl Tensor {
    /// Leaf tensor from raw data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::leaf(shape, data, false))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn variable(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::leaf(shape, data, true))
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward_fn: None,
            }),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Self::leaf(shape, vec![0.0; n], false)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let n = shape.iter().product();
        Self::leaf(shape, vec![value; n], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::leaf(vec![1], vec![value], false)
    }

    /// Op-node constructor: output value plus the rule that maps this node's
    /// gradient into its parents. The node is recorded on the tape only if
    /// some parent requires gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&Inner) + 'static,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires = parents.iter().any(|p| p.inner.requires_grad);
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: requires,
                parents: if requires { parents } else { Vec::new() },
                backward_fn: if requires { Some(Box::new(backward)) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw buffer. Used by optimizers and the
    /// finite-difference checker; never call while a forward graph built on
    /// the old values still needs its backward pass.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar. Gradients are accumulated into every
    /// `requires_grad` tensor reachable from `self`; calling twice without
    /// zeroing accumulates.
    pub fn backward(&self) -> Result<()> {
        self.backward_counted().map(|_| ())
    }

    /// Same as [`backward`](Self::backward) but reports how many backward
    /// rules ran; the reverse topological order visits each node exactly once.
    pub fn backward_counted(&self) -> Result<usize> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.requires_grad {
            return Err(Error::Usage(
                "loss does not depend on any tensor that requires gradients".into(),
            ));
        }
        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);
        let mut visited = 0usize;
        for node in order.iter().rev() {
            if let Some(f) = &node.inner.backward_fn {
                f(&node.inner);
                visited += 1;
            }
        }
        Ok(visited)
    }

    /// Parents-before-children ordering of the requires-grad subgraph.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.inner.id) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.inner.parents {
                if p.inner.requires_grad && !seen.contains(&p.inner.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    pub(crate) fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}
