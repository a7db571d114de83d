//! Dense float64 tensors with a tape-free reverse-mode autodiff graph.
//!
//! Every tensor is an immutable node. Nodes created from inputs that require
//! gradients record the producing [`Op`]; [`Tensor::backward`] walks the
//! reachable subgraph in reverse creation order, which is a valid reverse
//! topological order because parents always exist before their children.

mod backward;
pub mod gradcheck;
pub mod kernels;
mod ops;

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

pub use ops::{apply_primitive, Primitive};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Recorded producer of a graph node.
pub(crate) enum Op {
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    Slice { input: Tensor, axis: usize, start: usize },
    Concat { inputs: Vec<Tensor>, axis: usize },
    Sum(Tensor),
    Mean(Tensor),
    SumAxis { input: Tensor, axis: usize },
    Exp(Tensor),
    Log(Tensor),
    Tanh(Tensor),
    Relu(Tensor),
    Softplus(Tensor),
    Softmax(Tensor),
    LayerNorm { input: Tensor, rstd: Vec<f64> },
    Cholesky(Tensor),
    SolveSpd { a: Tensor, b: Tensor, factor: Vec<f64> },
    Diagonal(Tensor),
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![a, b]
            }
            Op::SolveSpd { a, b, .. } => vec![a, b],
            Op::Concat { inputs, .. } => inputs.iter().collect(),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Softmax(a)
            | Op::Cholesky(a)
            | Op::Diagonal(a) => vec![a],
            Op::Slice { input, .. } | Op::SumAxis { input, .. } | Op::LayerNorm { input, .. } => {
                vec![input]
            }
        }
    }
}

pub(crate) struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// Shared handle to a graph node. Cloning is cheap and shares the node.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel(shape), data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at flat index {i}")));
        }
        Ok(Tensor(Rc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            data,
            requires_grad,
            grad: RefCell::new(None),
            op: None,
        })))
    }

    /// Constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::leaf(shape, data, false)
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::leaf(shape, data, true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[], vec![v]).expect("finite scalar")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![0.0; numel(shape)]).expect("zeros")
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![1.0; numel(shape)]).expect("ones")
    }

    pub fn eye(d: usize) -> Tensor {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        Tensor::new(&[d, d], data).expect("eye")
    }

    /// Builds an op output. Non-finite values are always rejected in debug
    /// builds; release builds defer the scan to loss values.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: impl FnOnce() -> Op,
        any_grad: bool,
    ) -> Result<Tensor> {
        debug_assert_eq!(numel(&shape), data.len(), "{name}");
        if cfg!(debug_assertions) && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        Ok(Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad: any_grad,
            grad: RefCell::new(None),
            op: if any_grad { Some(op()) } else { None },
        })))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when the tensor was produced by a recorded op.
    pub fn is_attached(&self) -> bool {
        self.0.op.is_some()
    }

    /// Accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    /// Constant copy, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            requires_grad: false,
            grad: RefCell::new(None),
            op: None,
        }))
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank");
        let mut flat = 0;
        for (&i, &s) in index.iter().zip(&self.0.shape) {
            assert!(i < s, "index out of bounds");
            flat = flat * s + i;
        }
        self.0.data[flat]
    }

    pub(crate) fn id(&self) -> usize {
        self.0.id
    }

    pub(crate) fn node(&self) -> &Node {
        &self.0
    }

    /// Errors if any value is non-finite. Used on loss values in release builds.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.0.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }
}
