//! Reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! Every primitive returns a new immutable [`Tensor`]. When gradient
//! recording is enabled and at least one input is tracked, the result keeps
//! a node naming the primitive and its inputs. [`Tensor::backward`] walks
//! those nodes from a scalar loss and returns a [`Gradients`] map for every
//! leaf created with [`Tensor::param`].
//!
//! Tensors are identified by a monotonically increasing id. Inputs are always
//! created before the tensors computed from them, so sorting reachable nodes
//! by descending id gives a valid reverse topological order.
//!
//! ```
//! use mnat::tensor::Tensor;
//!
//! let x = Tensor::param(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
//! let loss = x.mul(&x).unwrap().sum();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.get(&x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```

mod autograd;
mod gemm;
mod ops;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub use autograd::Gradients;
pub(crate) use ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Tensor>,
}

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f32>,
    pub(crate) requires_grad: bool,
    pub(crate) node: Option<Node>,
}

/// An n-dimensional row-major `f32` array, optionally part of a
/// differentiable graph. Cloning is cheap and shares storage.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Inner>);

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            node,
        }))
    }

    fn checked(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self::build(shape, data, requires_grad, None))
    }

    /// A constant leaf; never receives a gradient.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::checked(shape, data, false)
    }

    /// A trainable leaf.
    pub fn param(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::checked(shape, data, true)
    }

    pub fn scalar(value: f32) -> Self {
        Self::build(vec![], vec![value], false, None)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::build(shape, vec![0.0; n], false, None)
    }

    /// Builds the result of a primitive. A node is kept only while recording
    /// is enabled and some input is tracked.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f32>, op: Op, inputs: Vec<Tensor>) -> Self {
        let tracked = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if tracked {
            Self::build(shape, data, true, Some(Node { op, inputs }))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when the tensor has no recorded producer.
    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.0.data[0]
    }

    /// A constant copy cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Name of the primitive that produced this tensor, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op.name())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_name())
            .finish()
    }
}
