//! Minimal define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable dense `f64` array in row-major order. Tensors
//! created with [`Tensor::param`] are gradient leaves; every operation whose
//! inputs include a gradient-carrying tensor records its inputs and backward
//! rule on the output, so the graph is rebuilt on every forward pass.
//! [`Tensor::backward`] walks that graph once in reverse topological order and
//! accumulates gradients into the leaves.
//!
//! Broadcasting is limited to rank-0 operands of binary elementwise ops.

mod backward;
pub mod gradcheck;
mod ops;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub use ops::ReduceOp;

/// Errors raised by tensor operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: value {value} at index {index} is outside the domain")]
    Domain { op: &'static str, index: usize, value: f64 },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Backward rule of a recorded operation, holding its inputs.
pub(crate) enum Op {
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Exp(Tensor),
    Log(Tensor),
    Neg(Tensor),
    Sqrt(Tensor),
    Relu(Tensor),
    MaxScalar(Tensor, f64),
    Scale(Tensor, f64),
    Reduce {
        input: Tensor,
        op: ReduceOp,
        axis: Option<usize>,
        /// For max: flat input index selected for every output element.
        argmax: Vec<usize>,
    },
    SoftmaxRows(Tensor, f64),
    LogSoftmaxRows(Tensor, f64),
    NarrowCols(Tensor, usize),
    NormalizeRows(Tensor),
    PairwiseSqDist(Tensor, Tensor),
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::PairwiseSqDist(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Neg(a)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::MaxScalar(a, _)
            | Op::Scale(a, _)
            | Op::SoftmaxRows(a, _)
            | Op::LogSoftmaxRows(a, _)
            | Op::NarrowCols(a, _)
            | Op::NormalizeRows(a) => vec![a],
            Op::Reduce { input, .. } => vec![input],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Neg(..) => "neg",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::MaxScalar(..) => "max_with_scalar",
            Op::Scale(..) => "scale",
            Op::Reduce { .. } => "reduce",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::NarrowCols(..) => "narrow_cols",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
        }
    }
}

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<Op>,
}

/// Dense row-major `f64` tensor with an optional link into the autodiff graph.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("data", &self.0.data)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(Op::name))
            .finish()
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if shape.contains(&0) {
        return Err(TensorError::Contract(format!(
            "tensor extents must be positive, got {shape:?}"
        )));
    }
    if expected != len {
        return Err(TensorError::Contract(format!(
            "shape {shape:?} needs {expected} values, got {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    fn from_node(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            grad: Mutex::new(None),
            requires_grad,
            op,
        }))
    }

    /// Records `op` as the producer of the result when any input carries a
    /// gradient; otherwise returns a plain constant.
    pub(crate) fn result(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        if op.inputs().iter().any(|t| t.requires_grad()) {
            Tensor::from_node(shape, data, true, Some(op))
        } else {
            Tensor::from_node(shape, data, false, None)
        }
    }

    /// A constant tensor that never receives gradients.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_len(shape, data.len())?;
        Ok(Tensor::from_node(shape.to_vec(), data, false, None))
    }

    /// A gradient leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_len(shape, data.len())?;
        Ok(Tensor::from_node(shape.to_vec(), data, true, None))
    }

    /// A rank-0 constant.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_node(Vec::new(), vec![value], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        Tensor::new(shape, vec![value; shape.iter().product()])
    }

    /// Builds an `rows × cols` constant from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Contract("ragged rows".into()));
        }
        Tensor::new(&[rows.len(), cols], rows.concat())
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

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when the tensor was produced by a recorded operation.
    pub fn has_graph(&self) -> bool {
        self.0.op.is_some()
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Element `(row, col)` of a rank-2 tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.0.data[row * self.0.shape[1] + col]
    }

    /// The accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// The same values without graph linkage.
    pub fn detach(&self) -> Tensor {
        Tensor::from_node(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }
}
