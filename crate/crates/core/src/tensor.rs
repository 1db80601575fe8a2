//! Dense f64 tensors and a define-by-run reverse-mode differentiation tape.
//!
//! Persistent values (model parameters, dataset matrices) live in [`Tensor`].
//! Each forward pass leases them onto a fresh [`Tape`] as leaves; every
//! operation validates shapes, computes its result eagerly, and records what
//! its adjoint needs. [`Tape::backward`] then walks the nodes once in reverse
//! creation order (which is a reverse topological order, since an operation
//! can only consume values created before it) and accumulates gradients.
//!
//! Gradients always accumulate with `+=`; callers reset them explicitly
//! through [`Tensor::zero_grad`]. All iteration orders are fixed, so repeated
//! runs over the same data produce bit-identical values and gradients.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

use crate::fmath;

/// Errors produced by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not describe {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    InvalidRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("cross_entropy_logits: label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("cross_entropy_logits: got {labels} labels for {rows} logit rows")]
    LabelCount { rows: usize, labels: usize },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: scalar argument {value} must be finite and non-zero")]
    BadScalar { op: &'static str, value: f64 },
    #[error("slice_rows: rows {start}..{end} out of range for {rows} rows")]
    RowRange { start: usize, end: usize, rows: usize },
    #[error("stack_rows: need at least one row")]
    EmptyStack,
    #[error("neighbor aggregation: {lists} neighbor lists for {nodes} nodes")]
    NeighborCount { nodes: usize, lists: usize },
    #[error("neighbor aggregation: node {node} lists neighbor {neighbor}, but the graph has {nodes} nodes")]
    NeighborIndex {
        node: usize,
        neighbor: usize,
        nodes: usize,
    },
    #[error("neighbor aggregation: node {node} has no neighbors, {kind} is undefined")]
    IsolatedNode { node: usize, kind: &'static str },
}

pub type TensorResult<T> = core::result::Result<T, TensorError>;

// ── Persistent tensors ──────────────────────────────────────────────────────

/// A dense row-major f64 tensor with an optional accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` describes exactly `data.len()`
    /// elements.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Self> {
        let mut numel: usize = 1;
        for &d in &shape {
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| TensorError::InvalidShape {
                    shape: shape.clone(),
                    len: data.len(),
                })?;
        }
        if shape.is_empty() || numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(shape.to_vec(), vec![0.0; numel]).expect("consistent shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(vec![1], vec![value]).expect("scalar shape")
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Resets the accumulated gradient to zeros (allocating it if needed).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Adds `delta` into the accumulated gradient.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Mutable values alongside the read-only gradient, so an optimizer can
    /// update in place while reading the gradient it just harvested.
    pub fn data_and_grad_mut(&mut self) -> (&mut [f64], Option<&[f64]>) {
        (&mut self.data, self.grad.as_deref())
    }
}

// ── Tape values and operations ──────────────────────────────────────────────

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Neighborhood aggregation flavors used by the graph layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregatorKind {
    Sum,
    Mean,
    Softmax,
}

impl AggregatorKind {
    fn name(self) -> &'static str {
        match self {
            AggregatorKind::Sum => "sum",
            AggregatorKind::Mean => "mean",
            AggregatorKind::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }
}

/// How the right operand of an elementwise op lines up with the left one.
#[derive(Debug, Clone, Copy)]
enum Broadcast {
    /// Identical shapes.
    Same,
    /// Right operand is a single element.
    RhsScalar,
    /// Left is `[rows, cols]`, right is `[cols]`, applied to every row.
    RhsRow,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        broadcast: Broadcast,
        lhs: ValueId,
        rhs: ValueId,
    },
    MatMul {
        lhs: ValueId,
        rhs: ValueId,
    },
    Scale {
        input: ValueId,
        factor: f64,
    },
    DivScalar {
        input: ValueId,
        divisor: f64,
    },
    Activation {
        kind: Activation,
        input: ValueId,
    },
    SoftmaxRows {
        input: ValueId,
    },
    Reduce {
        kind: ReduceKind,
        axis: usize,
        input: ValueId,
    },
    CrossEntropy {
        logits: ValueId,
        labels: Arc<Vec<usize>>,
    },
    Concat {
        axis: usize,
        lhs: ValueId,
        rhs: ValueId,
    },
    StackRows {
        parts: Arc<Vec<ValueId>>,
    },
    SliceRows {
        input: ValueId,
        start: usize,
        rows: usize,
    },
    Transpose {
        input: ValueId,
    },
    NeighborAgg {
        kind: AggregatorKind,
        input: ValueId,
        neighbors: Arc<Vec<Vec<usize>>>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// A recording of one forward computation.
///
/// Tapes are cheap to create and are meant to be rebuilt for every forward
/// pass. A tape is confined to one thread at a time; independent tapes may
/// run on different threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded values.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Gradient of the most recent `backward` target w.r.t. this value, if
    /// the value participates in it and requires a gradient.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad: None,
            requires_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Records a new leaf value.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> TensorResult<ValueId> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), data, requires_grad))
    }

    /// Records a constant (non-differentiable) leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> TensorResult<ValueId> {
        self.leaf(shape, data, false)
    }

    /// Leases a persistent tensor onto the tape, keeping its grad flag.
    pub fn param(&mut self, tensor: &Tensor) -> ValueId {
        self.push(
            Op::Leaf,
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
        )
    }

    // ── Elementwise and linear algebra ──────────────────────────────────

    fn binary(&mut self, kind: BinaryKind, lhs: ValueId, rhs: ValueId) -> TensorResult<ValueId> {
        let ls = self.shape(lhs);
        let rs = self.shape(rhs);
        let broadcast = if ls == rs {
            Broadcast::Same
        } else if rs.iter().product::<usize>() == 1 {
            Broadcast::RhsScalar
        } else if ls.len() == 2 && rs.len() == 1 && rs[0] == ls[1] {
            Broadcast::RhsRow
        } else {
            return Err(TensorError::ShapeMismatch {
                op: kind.name(),
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        };
        let shape = ls.to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let a = self.data(lhs);
        let b = self.data(rhs);
        let mut out = Vec::with_capacity(a.len());
        for (i, &av) in a.iter().enumerate() {
            let bv = match broadcast {
                Broadcast::Same => b[i],
                Broadcast::RhsScalar => b[0],
                Broadcast::RhsRow => b[i % cols],
            };
            out.push(match kind {
                BinaryKind::Add => av + bv,
                BinaryKind::Sub => av - bv,
                BinaryKind::Mul => av * bv,
            });
        }
        let rg = self.requires_grad(lhs) || self.requires_grad(rhs);
        Ok(self.push(
            Op::Binary {
                kind,
                broadcast,
                lhs,
                rhs,
            },
            shape,
            out,
            rg,
        ))
    }

    /// Elementwise sum. The right operand may also be a single element or,
    /// for a matrix left operand, a row vector applied to every row.
    pub fn add(&mut self, lhs: ValueId, rhs: ValueId) -> TensorResult<ValueId> {
        self.binary(BinaryKind::Add, lhs, rhs)
    }

    /// Elementwise difference, with the same broadcasting as [`Tape::add`].
    pub fn sub(&mut self, lhs: ValueId, rhs: ValueId) -> TensorResult<ValueId> {
        self.binary(BinaryKind::Sub, lhs, rhs)
    }

    /// Elementwise (Hadamard) product, with the same broadcasting as
    /// [`Tape::add`].
    pub fn mul(&mut self, lhs: ValueId, rhs: ValueId) -> TensorResult<ValueId> {
        self.binary(BinaryKind::Mul, lhs, rhs)
    }

    /// Matrix product of two rank-2 values.
    pub fn matmul(&mut self, lhs: ValueId, rhs: ValueId) -> TensorResult<ValueId> {
        let ls = self.shape(lhs).to_vec();
        let rs = self.shape(rhs).to_vec();
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ls,
                rhs: rs,
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(self.data(lhs), self.data(rhs), m, k, n, &mut out);
        let rg = self.requires_grad(lhs) || self.requires_grad(rhs);
        Ok(self.push(Op::MatMul { lhs, rhs }, vec![m, n], out, rg))
    }

    /// Multiplies every element by a fixed (non-differentiated) factor.
    pub fn scale(&mut self, input: ValueId, factor: f64) -> TensorResult<ValueId> {
        if !factor.is_finite() {
            return Err(TensorError::BadScalar {
                op: "scale",
                value: factor,
            });
        }
        let data = self.data(input).iter().map(|v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        Ok(self.push(Op::Scale { input, factor }, shape, data, rg))
    }

    /// Divides every element by a fixed non-zero divisor.
    pub fn div_scalar(&mut self, input: ValueId, divisor: f64) -> TensorResult<ValueId> {
        if !divisor.is_finite() || divisor == 0.0 {
            return Err(TensorError::BadScalar {
                op: "div_scalar",
                value: divisor,
            });
        }
        let data = self.data(input).iter().map(|v| v / divisor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        Ok(self.push(Op::DivScalar { input, divisor }, shape, data, rg))
    }

    pub fn activation(&mut self, input: ValueId, kind: Activation) -> TensorResult<ValueId> {
        let data: Vec<f64> = self
            .data(input)
            .iter()
            .map(|&x| match kind {
                Activation::Sigmoid => fmath::sigmoid(x),
                Activation::Tanh => fmath::tanh(x),
                Activation::Relu => {
                    if x > 0.0 {
                        x
                    } else {
                        0.0
                    }
                }
                Activation::Exp => fmath::exp(x),
            })
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        Ok(self.push(Op::Activation { kind, input }, shape, data, rg))
    }

    pub fn sigmoid(&mut self, input: ValueId) -> TensorResult<ValueId> {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, input: ValueId) -> TensorResult<ValueId> {
        self.activation(input, Activation::Tanh)
    }

    pub fn relu(&mut self, input: ValueId) -> TensorResult<ValueId> {
        self.activation(input, Activation::Relu)
    }

    pub fn exp(&mut self, input: ValueId) -> TensorResult<ValueId> {
        self.activation(input, Activation::Exp)
    }

    /// Row-wise softmax of a rank-2 value, stabilized by subtracting each
    /// row's maximum before exponentiation.
    pub fn softmax_rows(&mut self, input: ValueId) -> TensorResult<ValueId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidRank {
                op: "softmax_rows",
                expected: 2,
                shape,
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let x = self.data(input);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for c in 0..cols {
                let e = fmath::exp(row[c] - max);
                out[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= sum;
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(Op::SoftmaxRows { input }, shape, out, rg))
    }

    /// Sum or mean over one axis. Rank-1 values reduce to a single element;
    /// rank-2 values lose the reduced axis.
    pub fn reduce(&mut self, input: ValueId, axis: usize, kind: ReduceKind) -> TensorResult<ValueId> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "reduce",
                axis,
                shape,
            });
        }
        let x = self.data(input);
        let (out_shape, mut out) = match shape.len() {
            1 => (vec![1], vec![x.iter().sum::<f64>()]),
            2 => {
                let (rows, cols) = (shape[0], shape[1]);
                if axis == 0 {
                    let mut acc = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            acc[c] += x[r * cols + c];
                        }
                    }
                    (vec![cols], acc)
                } else {
                    let mut acc = vec![0.0; rows];
                    for r in 0..rows {
                        for c in 0..cols {
                            acc[r] += x[r * cols + c];
                        }
                    }
                    (vec![rows], acc)
                }
            }
            _ => {
                return Err(TensorError::InvalidRank {
                    op: "reduce",
                    expected: 2,
                    shape,
                })
            }
        };
        if let ReduceKind::Mean = kind {
            let len = shape[axis] as f64;
            out.iter_mut().for_each(|v| *v /= len);
        }
        let rg = self.requires_grad(input);
        Ok(self.push(Op::Reduce { kind, axis, input }, out_shape, out, rg))
    }

    /// Mean cross-entropy between logit rows and integer class labels,
    /// computed through a max-shifted log-sum-exp.
    pub fn cross_entropy_logits(&mut self, logits: ValueId, labels: &[usize]) -> TensorResult<ValueId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidRank {
                op: "cross_entropy_logits",
                expected: 2,
                shape,
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        if labels.len() != rows {
            return Err(TensorError::LabelCount {
                rows,
                labels: labels.len(),
            });
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= cols {
                return Err(TensorError::LabelOutOfRange {
                    row,
                    label,
                    classes: cols,
                });
            }
        }
        let x = self.data(logits);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * cols..(r + 1) * cols];
            total += log_sum_exp(row) - row[label];
        }
        let loss = total / rows as f64;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: Arc::new(labels.to_vec()),
            },
            vec![1],
            vec![loss],
            rg,
        ))
    }

    // ── Shape manipulation ──────────────────────────────────────────────

    /// Concatenates two values of equal rank along `axis`. Rank-1 values
    /// concatenate along axis 0; rank-2 values along either axis.
    pub fn concat(&mut self, lhs: ValueId, rhs: ValueId, axis: usize) -> TensorResult<ValueId> {
        let ls = self.shape(lhs).to_vec();
        let rs = self.shape(rhs).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "concat",
            lhs: ls.clone(),
            rhs: rs.clone(),
        };
        let rg = self.requires_grad(lhs) || self.requires_grad(rhs);
        match (ls.len(), rs.len(), axis) {
            (1, 1, 0) => {
                let mut data = self.data(lhs).to_vec();
                data.extend_from_slice(self.data(rhs));
                let shape = vec![ls[0] + rs[0]];
                Ok(self.push(Op::Concat { axis, lhs, rhs }, shape, data, rg))
            }
            (2, 2, 0) => {
                if ls[1] != rs[1] {
                    return Err(mismatch());
                }
                let mut data = self.data(lhs).to_vec();
                data.extend_from_slice(self.data(rhs));
                let shape = vec![ls[0] + rs[0], ls[1]];
                Ok(self.push(Op::Concat { axis, lhs, rhs }, shape, data, rg))
            }
            (2, 2, 1) => {
                if ls[0] != rs[0] {
                    return Err(mismatch());
                }
                let (rows, lc, rc) = (ls[0], ls[1], rs[1]);
                let a = self.data(lhs);
                let b = self.data(rhs);
                let mut data = Vec::with_capacity(rows * (lc + rc));
                for r in 0..rows {
                    data.extend_from_slice(&a[r * lc..(r + 1) * lc]);
                    data.extend_from_slice(&b[r * rc..(r + 1) * rc]);
                }
                let shape = vec![rows, lc + rc];
                Ok(self.push(Op::Concat { axis, lhs, rhs }, shape, data, rg))
            }
            (rank, _, _) if axis >= rank.max(1) => Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                shape: ls,
            }),
            _ => Err(mismatch()),
        }
    }

    /// Stacks single-row values `[1, cols]` into a `[k, cols]` matrix.
    pub fn stack_rows(&mut self, parts: &[ValueId]) -> TensorResult<ValueId> {
        let first = *parts.first().ok_or(TensorError::EmptyStack)?;
        let fs = self.shape(first).to_vec();
        if fs.len() != 2 || fs[0] != 1 {
            return Err(TensorError::InvalidRank {
                op: "stack_rows",
                expected: 2,
                shape: fs,
            });
        }
        let cols = fs[1];
        let mut data = Vec::with_capacity(parts.len() * cols);
        let mut rg = false;
        for &part in parts {
            let ps = self.shape(part);
            if ps != [1, cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: fs,
                    rhs: ps.to_vec(),
                });
            }
            data.extend_from_slice(self.data(part));
            rg |= self.requires_grad(part);
        }
        let shape = vec![parts.len(), cols];
        Ok(self.push(
            Op::StackRows {
                parts: Arc::new(parts.to_vec()),
            },
            shape,
            data,
            rg,
        ))
    }

    /// Copies `rows` consecutive rows starting at `start` out of a rank-2
    /// value.
    pub fn slice_rows(&mut self, input: ValueId, start: usize, rows: usize) -> TensorResult<ValueId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidRank {
                op: "slice_rows",
                expected: 2,
                shape,
            });
        }
        let (total, cols) = (shape[0], shape[1]);
        if rows == 0 || start + rows > total {
            return Err(TensorError::RowRange {
                start,
                end: start + rows,
                rows: total,
            });
        }
        let data = self.data(input)[start * cols..(start + rows) * cols].to_vec();
        let rg = self.requires_grad(input);
        Ok(self.push(
            Op::SliceRows { input, start, rows },
            vec![rows, cols],
            data,
            rg,
        ))
    }

    /// Transpose of a rank-2 value.
    pub fn transpose(&mut self, input: ValueId) -> TensorResult<ValueId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidRank {
                op: "transpose",
                expected: 2,
                shape,
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let x = self.data(input);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = x[r * cols + c];
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(Op::Transpose { input }, vec![cols, rows], data, rg))
    }

    // ── Neighborhood aggregation ────────────────────────────────────────

    /// Aggregates node feature rows over per-node neighbor lists.
    ///
    /// Node `i` of the result combines rows `neighbors[i]` of the input:
    /// plain sum, degree-normalized mean, or a feature-wise softmax-weighted
    /// sum where each neighbor's contribution is scaled by
    /// `exp(x_j) / Σ_k exp(x_k)` per feature dimension. Neighbors are always
    /// visited in ascending index order, so enumeration order never affects
    /// the result. Mean and softmax require every node to have at least one
    /// neighbor; a sum over an empty list is zero.
    pub fn neighbor_agg(
        &mut self,
        input: ValueId,
        neighbors: &Arc<Vec<Vec<usize>>>,
        kind: AggregatorKind,
    ) -> TensorResult<ValueId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidRank {
                op: "neighbor_agg",
                expected: 2,
                shape,
            });
        }
        let (n, cols) = (shape[0], shape[1]);
        if neighbors.len() != n {
            return Err(TensorError::NeighborCount {
                nodes: n,
                lists: neighbors.len(),
            });
        }
        for (node, list) in neighbors.iter().enumerate() {
            if list.is_empty() && kind != AggregatorKind::Sum {
                return Err(TensorError::IsolatedNode {
                    node,
                    kind: kind.name(),
                });
            }
            for &j in list {
                if j >= n {
                    return Err(TensorError::NeighborIndex {
                        node,
                        neighbor: j,
                        nodes: n,
                    });
                }
            }
        }
        let x = self.data(input);
        let mut out = vec![0.0; n * cols];
        let mut sorted = Vec::new();
        for (i, list) in neighbors.iter().enumerate() {
            let idx = sorted_indices(list, &mut sorted);
            match kind {
                AggregatorKind::Sum => {
                    for &j in idx {
                        for c in 0..cols {
                            out[i * cols + c] += x[j * cols + c];
                        }
                    }
                }
                AggregatorKind::Mean => {
                    let inv = 1.0 / idx.len() as f64;
                    for &j in idx {
                        for c in 0..cols {
                            out[i * cols + c] += x[j * cols + c];
                        }
                    }
                    for c in 0..cols {
                        out[i * cols + c] *= inv;
                    }
                }
                AggregatorKind::Softmax => {
                    for c in 0..cols {
                        let mut max = f64::NEG_INFINITY;
                        for &j in idx {
                            max = max.max(x[j * cols + c]);
                        }
                        let mut den = 0.0;
                        let mut num = 0.0;
                        for &j in idx {
                            let v = x[j * cols + c];
                            let e = fmath::exp(v - max);
                            den += e;
                            num += v * e;
                        }
                        out[i * cols + c] = num / den;
                    }
                }
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(
            Op::NeighborAgg {
                kind,
                input,
                neighbors: Arc::clone(neighbors),
            },
            shape,
            out,
            rg,
        ))
    }

    // ── Reverse pass ────────────────────────────────────────────────────

    /// Runs reverse-mode differentiation from a scalar loss, accumulating
    /// gradients (with `+=`) into every gradient-requiring value that the
    /// loss depends on. May be called repeatedly; gradients keep adding up
    /// until cleared.
    pub fn backward(&mut self, loss: ValueId) -> TensorResult<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let mut adjoint: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if adjoint[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let (lower, upper) = adjoint.split_at_mut(id);
            let g = upper[0].as_ref().expect("adjoint present");
            self.propagate(id, g, lower);
        }

        for (node, slot) in self.nodes.iter_mut().zip(adjoint) {
            if let (true, Some(adj)) = (node.requires_grad, slot) {
                let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
                for (dst, src) in grad.iter_mut().zip(&adj) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    /// Adds this node's contribution to its inputs' adjoints. `lower` holds
    /// the adjoint slots of all earlier values.
    fn propagate(&self, id: usize, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let needs = |vid: ValueId| self.nodes[vid.0].requires_grad;
        let adj = |lower: &mut [Option<Vec<f64>>], vid: ValueId, len: usize| -> *mut f64 {
            lower[vid.0]
                .get_or_insert_with(|| vec![0.0; len])
                .as_mut_ptr()
        };
        // A closure returning &mut would fight the borrow checker when both
        // operands alias the same slot (e.g. add(x, x)); raw slices keep the
        // accumulation explicit and safe because every write is in-bounds.
        macro_rules! grad_slice {
            ($vid:expr) => {{
                let len = self.nodes[$vid.0].data.len();
                let ptr = adj(lower, $vid, len);
                unsafe { core::slice::from_raw_parts_mut(ptr, len) }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                broadcast,
                lhs,
                rhs,
            } => {
                let cols = *node.shape.last().unwrap_or(&1);
                let lhs_data = &self.nodes[lhs.0].data;
                let rhs_data = &self.nodes[rhs.0].data;
                if needs(*lhs) {
                    let dl = grad_slice!(*lhs);
                    for (i, &gv) in g.iter().enumerate() {
                        dl[i] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => gv,
                            BinaryKind::Mul => {
                                let bv = match broadcast {
                                    Broadcast::Same => rhs_data[i],
                                    Broadcast::RhsScalar => rhs_data[0],
                                    Broadcast::RhsRow => rhs_data[i % cols],
                                };
                                gv * bv
                            }
                        };
                    }
                }
                if needs(*rhs) {
                    let dr = grad_slice!(*rhs);
                    for (i, &gv) in g.iter().enumerate() {
                        let ri = match broadcast {
                            Broadcast::Same => i,
                            Broadcast::RhsScalar => 0,
                            Broadcast::RhsRow => i % cols,
                        };
                        dr[ri] += match kind {
                            BinaryKind::Add => gv,
                            BinaryKind::Sub => -gv,
                            BinaryKind::Mul => gv * lhs_data[i],
                        };
                    }
                }
            }
            Op::MatMul { lhs, rhs } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let k = self.nodes[lhs.0].shape[1];
                if needs(*lhs) {
                    let b = &self.nodes[rhs.0].data;
                    let dl = grad_slice!(*lhs);
                    matmul_nt(g, b, m, n, k, dl);
                }
                if needs(*rhs) {
                    let a = &self.nodes[lhs.0].data;
                    let dr = grad_slice!(*rhs);
                    matmul_tn(a, g, m, k, n, dr);
                }
            }
            Op::Scale { input, factor } => {
                if needs(*input) {
                    let dx = grad_slice!(*input);
                    for (i, &gv) in g.iter().enumerate() {
                        dx[i] += gv * factor;
                    }
                }
            }
            Op::DivScalar { input, divisor } => {
                if needs(*input) {
                    let dx = grad_slice!(*input);
                    for (i, &gv) in g.iter().enumerate() {
                        dx[i] += gv / divisor;
                    }
                }
            }
            Op::Activation { kind, input } => {
                if needs(*input) {
                    let x = &self.nodes[input.0].data;
                    let y = &node.data;
                    let dx = grad_slice!(*input);
                    for (i, &gv) in g.iter().enumerate() {
                        dx[i] += gv
                            * match kind {
                                Activation::Sigmoid => y[i] * (1.0 - y[i]),
                                Activation::Tanh => 1.0 - y[i] * y[i],
                                Activation::Relu => {
                                    if x[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Activation::Exp => y[i],
                            };
                    }
                }
            }
            Op::SoftmaxRows { input } => {
                if needs(*input) {
                    let (rows, cols) = (node.shape[0], node.shape[1]);
                    let y = &node.data;
                    let dx = grad_slice!(*input);
                    for r in 0..rows {
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dot += g[r * cols + c] * y[r * cols + c];
                        }
                        for c in 0..cols {
                            let i = r * cols + c;
                            dx[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::Reduce { kind, axis, input } => {
                if needs(*input) {
                    let in_shape = &self.nodes[input.0].shape;
                    let scale = match kind {
                        ReduceKind::Sum => 1.0,
                        ReduceKind::Mean => 1.0 / in_shape[*axis] as f64,
                    };
                    let dx = grad_slice!(*input);
                    match in_shape.len() {
                        1 => {
                            for v in dx.iter_mut() {
                                *v += g[0] * scale;
                            }
                        }
                        _ => {
                            let (rows, cols) = (in_shape[0], in_shape[1]);
                            for r in 0..rows {
                                for c in 0..cols {
                                    let gv = if *axis == 0 { g[c] } else { g[r] };
                                    dx[r * cols + c] += gv * scale;
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if needs(*logits) {
                    let shape = &self.nodes[logits.0].shape;
                    let (rows, cols) = (shape[0], shape[1]);
                    let x = &self.nodes[logits.0].data;
                    let upstream = g[0] / rows as f64;
                    let dx = grad_slice!(*logits);
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &x[r * cols..(r + 1) * cols];
                        let lse = log_sum_exp(row);
                        for c in 0..cols {
                            let p = fmath::exp(row[c] - lse);
                            let target = if c == label { 1.0 } else { 0.0 };
                            dx[r * cols + c] += upstream * (p - target);
                        }
                    }
                }
            }
            Op::Concat { axis, lhs, rhs } => {
                let ls = &self.nodes[lhs.0].shape;
                if *axis == 0 || ls.len() == 1 {
                    let split = self.nodes[lhs.0].data.len();
                    if needs(*lhs) {
                        let dl = grad_slice!(*lhs);
                        for (i, &gv) in g[..split].iter().enumerate() {
                            dl[i] += gv;
                        }
                    }
                    if needs(*rhs) {
                        let dr = grad_slice!(*rhs);
                        for (i, &gv) in g[split..].iter().enumerate() {
                            dr[i] += gv;
                        }
                    }
                } else {
                    let (rows, lc) = (ls[0], ls[1]);
                    let rc = self.nodes[rhs.0].shape[1];
                    let cols = lc + rc;
                    if needs(*lhs) {
                        let dl = grad_slice!(*lhs);
                        for r in 0..rows {
                            for c in 0..lc {
                                dl[r * lc + c] += g[r * cols + c];
                            }
                        }
                    }
                    if needs(*rhs) {
                        let dr = grad_slice!(*rhs);
                        for r in 0..rows {
                            for c in 0..rc {
                                dr[r * rc + c] += g[r * cols + lc + c];
                            }
                        }
                    }
                }
            }
            Op::StackRows { parts } => {
                let cols = node.shape[1];
                for (r, &part) in parts.iter().enumerate() {
                    if needs(part) {
                        let dp = grad_slice!(part);
                        for c in 0..cols {
                            dp[c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::SliceRows { input, start, rows } => {
                if needs(*input) {
                    let cols = node.shape[1];
                    let dx = grad_slice!(*input);
                    for r in 0..*rows {
                        for c in 0..cols {
                            dx[(start + r) * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::Transpose { input } => {
                if needs(*input) {
                    let (rows, cols) = (node.shape[0], node.shape[1]);
                    let dx = grad_slice!(*input);
                    // node is [rows, cols]; input is [cols, rows].
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[c * rows + r] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::NeighborAgg {
                kind,
                input,
                neighbors,
            } => {
                if needs(*input) {
                    let cols = node.shape[1];
                    let x = &self.nodes[input.0].data;
                    let y = &node.data;
                    let dx = grad_slice!(*input);
                    let mut sorted = Vec::new();
                    for (i, list) in neighbors.iter().enumerate() {
                        let idx = sorted_indices(list, &mut sorted);
                        match kind {
                            AggregatorKind::Sum => {
                                for &j in idx {
                                    for c in 0..cols {
                                        dx[j * cols + c] += g[i * cols + c];
                                    }
                                }
                            }
                            AggregatorKind::Mean => {
                                let inv = 1.0 / idx.len() as f64;
                                for &j in idx {
                                    for c in 0..cols {
                                        dx[j * cols + c] += g[i * cols + c] * inv;
                                    }
                                }
                            }
                            AggregatorKind::Softmax => {
                                // y = Σ_j x_j·w_j with w_j = exp(x_j)/Σ exp;
                                // ∂y/∂x_j = w_j·(1 + x_j − y).
                                for c in 0..cols {
                                    let mut max = f64::NEG_INFINITY;
                                    for &j in idx {
                                        max = max.max(x[j * cols + c]);
                                    }
                                    let mut den = 0.0;
                                    for &j in idx {
                                        den += fmath::exp(x[j * cols + c] - max);
                                    }
                                    let yv = y[i * cols + c];
                                    let gv = g[i * cols + c];
                                    for &j in idx {
                                        let xv = x[j * cols + c];
                                        let w = fmath::exp(xv - max) / den;
                                        dx[j * cols + c] += gv * w * (1.0 + xv - yv);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────────────

/// `out += a·b` for row-major `a: [m,k]`, `b: [k,n]`.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out += a·bᵀ` for `a: [m,n]`, `b: [k,n]`, producing `[m,k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out += aᵀ·b` for `a: [m,k]`, `b: [m,n]`, producing `[k,n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let sum: f64 = row.iter().map(|&v| fmath::exp(v - max)).sum();
    max + fmath::ln(sum)
}

/// Returns `list` in ascending order, borrowing `buf` only when the list is
/// not already sorted.
fn sorted_indices<'a>(list: &'a [usize], buf: &'a mut Vec<usize>) -> &'a [usize] {
    if list.is_sorted() {
        list
    } else {
        buf.clear();
        buf.extend_from_slice(list);
        buf.sort_unstable();
        buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rel_err(ad: f64, fd: f64) -> f64 {
        (ad - fd).abs() / 1.0_f64.max(fd.abs())
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        let mut grad = Vec::with_capacity(x.len());
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + step;
            let hi = f(&probe);
            probe[i] = x[i] - step;
            let lo = f(&probe);
            probe[i] = x[i];
            grad.push((hi - lo) / (2.0 * step));
        }
        grad
    }

    /// Asserts autodiff and central differences agree on a scalar-valued
    /// function of one leaf.
    fn check_grad(build: &mut dyn FnMut(&mut Tape, ValueId) -> ValueId, shape: &[usize], x: &[f64]) {
        let mut tape = Tape::new();
        let leaf = tape.leaf(shape, x.to_vec(), true).unwrap();
        let loss = build(&mut tape, leaf);
        tape.backward(loss).unwrap();
        let ad = tape.grad(leaf).unwrap().to_vec();

        let mut eval = |probe: &[f64]| {
            let mut t = Tape::new();
            let leaf = t.leaf(shape, probe.to_vec(), false).unwrap();
            let out = build(&mut t, leaf);
            t.data(out)[0]
        };
        let fd = numeric_grad(&mut eval, x, 1e-6);
        for (i, (&a, &f)) in ad.iter().zip(&fd).enumerate() {
            assert!(
                rel_err(a, f) < 1e-4,
                "grad mismatch at {i}: autodiff {a} vs numeric {f}"
            );
        }
    }

    fn sum_all(tape: &mut Tape, id: ValueId) -> ValueId {
        let rank = tape.shape(id).len();
        let mut cur = id;
        for _ in 0..rank {
            cur = tape.reduce(cur, 0, ReduceKind::Sum).unwrap();
        }
        cur
    }

    fn random_vec(rng: &mut ChaCha12Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(matches!(
            Tensor::from_vec(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::InvalidShape { .. })
        ));
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let mut tape = Tape::new();
        let a = tape
            .constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let eye = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let prod = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.data(prod), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let col = tape.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let dot = tape.matmul(row, col).unwrap();
        assert_eq!(tape.shape(dot), &[1, 1]);
        assert_eq!(tape.data(dot), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        match tape.matmul(a, b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let a_data = random_vec(&mut rng, 5 * 4);
        let b_data = random_vec(&mut rng, 4 * 3);
        // Weight the output so each input element has a distinct gradient.
        let w_data = random_vec(&mut rng, 5 * 3);

        let b_fixed = b_data.clone();
        let w_fixed = w_data.clone();
        check_grad(
            &mut |tape, leaf| {
                let b = tape.constant(&[4, 3], b_fixed.clone()).unwrap();
                let w = tape.constant(&[5, 3], w_fixed.clone()).unwrap();
                let prod = tape.matmul(leaf, b).unwrap();
                let weighted = tape.mul(prod, w).unwrap();
                sum_all(tape, weighted)
            },
            &[5, 4],
            &a_data,
        );

        let a_fixed = a_data.clone();
        let w_fixed = w_data;
        check_grad(
            &mut |tape, leaf| {
                let a = tape.constant(&[5, 4], a_fixed.clone()).unwrap();
                let w = tape.constant(&[5, 3], w_fixed.clone()).unwrap();
                let prod = tape.matmul(a, leaf).unwrap();
                let weighted = tape.mul(prod, w).unwrap();
                sum_all(tape, weighted)
            },
            &[4, 3],
            &b_data,
        );
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(&[3], vec![1.0, -2.0, 3.0], true)
            .unwrap();
        let zero = tape.constant(&[3], vec![0.0; 3]).unwrap();
        let self_diff = tape.sub(x, x).unwrap();
        assert_eq!(tape.data(self_diff), &[0.0, 0.0, 0.0]);

        let product = tape.mul(x, zero).unwrap();
        assert_eq!(tape.data(product), &[0.0, 0.0, 0.0]);
        let loss = sum_all(&mut tape, product);
        tape.backward(loss).unwrap();
        // Multiplying by a zero constant kills the gradient into x.
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn row_broadcast_add_and_scalar_mul() {
        let mut tape = Tape::new();
        let m = tape
            .constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let row = tape.constant(&[3], vec![10.0, 20.0, 30.0]).unwrap();
        let shifted = tape.add(m, row).unwrap();
        assert_eq!(tape.data(shifted), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);

        let s = tape.constant(&[1], vec![2.0]).unwrap();
        let doubled = tape.mul(m, s).unwrap();
        assert_eq!(tape.data(doubled), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);

        let bad = tape.constant(&[2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            tape.add(m, bad),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn broadcast_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let m_data = random_vec(&mut rng, 6);
        let row_data = random_vec(&mut rng, 3);
        let w_data = random_vec(&mut rng, 6);

        // Gradient w.r.t. the broadcast row vector must sum over rows.
        let m_fixed = m_data.clone();
        let w_fixed = w_data.clone();
        check_grad(
            &mut |tape, leaf| {
                let m = tape.constant(&[2, 3], m_fixed.clone()).unwrap();
                let w = tape.constant(&[2, 3], w_fixed.clone()).unwrap();
                let sum = tape.add(m, leaf).unwrap();
                let prod = tape.mul(sum, w).unwrap();
                sum_all(tape, prod)
            },
            &[3],
            &row_data,
        );

        let row_fixed = row_data;
        let w_fixed = w_data;
        check_grad(
            &mut |tape, leaf| {
                let row = tape.constant(&[3], row_fixed.clone()).unwrap();
                let w = tape.constant(&[2, 3], w_fixed.clone()).unwrap();
                let prod = tape.mul(leaf, row).unwrap();
                let weighted = tape.mul(prod, w).unwrap();
                sum_all(tape, weighted)
            },
            &[2, 3],
            &m_data,
        );
    }

    #[test]
    fn activation_fixed_points() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[4], vec![0.0, 0.0, -3.0, 0.0], true).unwrap();
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.data(s)[0], 0.5);
        let t = tape.tanh(x).unwrap();
        assert_eq!(tape.data(t)[1], 0.0);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.data(r)[2], 0.0);
        let e = tape.exp(x).unwrap();
        assert_eq!(tape.data(e)[3], 1.0);

        // relu passes zero gradient at negative inputs (and at exactly 0).
        let loss = sum_all(&mut tape, r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap()[2], 0.0);
        assert_eq!(tape.grad(x).unwrap()[0], 0.0);
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for kind in [
            Activation::Sigmoid,
            Activation::Tanh,
            Activation::Relu,
            Activation::Exp,
        ] {
            // Keep relu probes away from the kink at 0.
            let x: Vec<f64> = random_vec(&mut rng, 6)
                .into_iter()
                .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
                .collect();
            let w = random_vec(&mut rng, 6);
            let w_fixed = w.clone();
            check_grad(
                &mut |tape, leaf| {
                    let w = tape.constant(&[6], w_fixed.clone()).unwrap();
                    let y = tape.activation(leaf, kind).unwrap();
                    let prod = tape.mul(y, w).unwrap();
                    sum_all(tape, prod)
                },
                &[6],
                &x,
            );
        }
    }

    #[test]
    fn softmax_rows_values() {
        let mut tape = Tape::new();
        let x = tape
            .constant(&[3, 2], vec![0.0, 0.0, 1000.0, 1000.0, 0.0, 0.4])
            .unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let d = tape.data(y);
        assert_eq!(&d[0..2], &[0.5, 0.5]);
        // Large equal logits must not overflow.
        assert_eq!(&d[2..4], &[0.5, 0.5]);
        assert!((d[4] - 0.40131).abs() < 1e-5);
        assert!((d[5] - 0.59869).abs() < 1e-5);
        for r in 0..3 {
            let sum: f64 = d[r * 2..(r + 1) * 2].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let x = random_vec(&mut rng, 8);
        let w = random_vec(&mut rng, 8);
        let w_fixed = w;
        check_grad(
            &mut |tape, leaf| {
                let w = tape.constant(&[2, 4], w_fixed.clone()).unwrap();
                let y = tape.softmax_rows(leaf).unwrap();
                let prod = tape.mul(y, w).unwrap();
                sum_all(tape, prod)
            },
            &[2, 4],
            &x,
        );
    }

    #[test]
    fn reduce_values_and_mean_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
        let total = tape.reduce(x, 0, ReduceKind::Sum).unwrap();
        assert_eq!(tape.data(total), &[6.0]);
        let mean = tape.reduce(x, 0, ReduceKind::Mean).unwrap();
        assert_eq!(tape.data(mean), &[2.0]);
        tape.backward(mean).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(tape.grad(x).unwrap(), &[third, third, third]);

        let m = tape
            .constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let by_col = tape.reduce(m, 0, ReduceKind::Sum).unwrap();
        assert_eq!(tape.data(by_col), &[5.0, 7.0, 9.0]);
        let by_row = tape.reduce(m, 1, ReduceKind::Mean).unwrap();
        assert_eq!(tape.data(by_row), &[2.0, 5.0]);

        assert!(matches!(
            tape.reduce(m, 2, ReduceKind::Sum),
            Err(TensorError::AxisOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones_and_square_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[4], vec![1.0, -2.0, 0.5, 3.0], true).unwrap();
        let total = tape.reduce(x, 0, ReduceKind::Sum).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&[3], vec![1.0, -2.0, 0.5], true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let total = sum_all(&mut tape, sq);
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let uniform = tape.constant(&[1, 4], vec![0.0; 4]).unwrap();
        let ce = tape.cross_entropy_logits(uniform, &[2]).unwrap();
        assert!((tape.data(ce)[0] - (4.0_f64).ln()).abs() < 1e-12);

        let confident = tape.constant(&[1, 4], vec![10.0, 0.0, 0.0, 0.0]).unwrap();
        let ce = tape.cross_entropy_logits(confident, &[0]).unwrap();
        let expected = (1.0 + 3.0 * (-10.0_f64).exp()).ln();
        assert!((tape.data(ce)[0] - expected).abs() < 1e-12);
        assert!(tape.data(ce)[0] < 1.4e-4);

        // Batch loss is the mean over rows.
        let both = tape
            .constant(&[2, 4], vec![0.0, 0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 0.0])
            .unwrap();
        let ce_both = tape.cross_entropy_logits(both, &[2, 0]).unwrap();
        let expected = ((4.0_f64).ln() + expected) / 2.0;
        assert!((tape.data(ce_both)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::new();
        let logits = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(
            tape.cross_entropy_logits(logits, &[0, 3]),
            Err(TensorError::LabelOutOfRange {
                row: 1,
                label: 3,
                classes: 3
            })
        ));
        assert!(matches!(
            tape.cross_entropy_logits(logits, &[0]),
            Err(TensorError::LabelCount { rows: 2, labels: 1 })
        ));
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let logits = random_vec(&mut rng, 3 * 5);
        check_grad(
            &mut |tape, leaf| tape.cross_entropy_logits(leaf, &[4, 0, 2]).unwrap(),
            &[3, 5],
            &logits,
        );
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn gradients_accumulate_until_cleared() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], vec![3.0, 4.0], true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = sum_all(&mut tape, sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0, 8.0]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0, 16.0]);
    }

    #[test]
    fn concat_values_and_gradient_split() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let b = tape.leaf(&[1], vec![3.0], true).unwrap();
        let joined = tape.concat(a, b, 0).unwrap();
        assert_eq!(tape.data(joined), &[1.0, 2.0, 3.0]);

        let left = tape
            .leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], true)
            .unwrap();
        let right = tape.leaf(&[2, 1], vec![9.0, 8.0], true).unwrap();
        let wide = tape.concat(left, right, 1).unwrap();
        assert_eq!(tape.shape(wide), &[2, 3]);
        assert_eq!(tape.data(wide), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);

        let w = tape
            .constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let prod = tape.mul(wide, w).unwrap();
        let loss = sum_all(&mut tape, prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(left).unwrap(), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(tape.grad(right).unwrap(), &[3.0, 6.0]);

        let tall = tape.concat(left, left, 0).unwrap();
        assert_eq!(tape.shape(tall), &[4, 2]);
    }

    #[test]
    fn stack_slice_transpose_roundtrip() {
        let mut tape = Tape::new();
        let r0 = tape.leaf(&[1, 3], vec![1.0, 2.0, 3.0], true).unwrap();
        let r1 = tape.leaf(&[1, 3], vec![4.0, 5.0, 6.0], true).unwrap();
        let stacked = tape.stack_rows(&[r0, r1]).unwrap();
        assert_eq!(tape.shape(stacked), &[2, 3]);

        let back = tape.slice_rows(stacked, 1, 1).unwrap();
        assert_eq!(tape.data(back), &[4.0, 5.0, 6.0]);

        let t = tape.transpose(stacked).unwrap();
        assert_eq!(tape.shape(t), &[3, 2]);
        assert_eq!(tape.data(t), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);

        let w = tape
            .constant(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let prod = tape.mul(t, w).unwrap();
        let loss = sum_all(&mut tape, prod);
        tape.backward(loss).unwrap();
        // d loss / d r0 follows the transpose back to rows.
        assert_eq!(tape.grad(r0).unwrap(), &[1.0, 3.0, 5.0]);
        assert_eq!(tape.grad(r1).unwrap(), &[2.0, 4.0, 6.0]);

        assert!(matches!(
            tape.slice_rows(stacked, 1, 2),
            Err(TensorError::RowRange { .. })
        ));
    }

    #[test]
    fn neighbor_agg_validates_lists() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3, 2], vec![0.0; 6]).unwrap();
        let bad_count = Arc::new(vec![vec![1], vec![0]]);
        assert!(matches!(
            tape.neighbor_agg(x, &bad_count, AggregatorKind::Sum),
            Err(TensorError::NeighborCount { nodes: 3, lists: 2 })
        ));
        let bad_index = Arc::new(vec![vec![1], vec![3], vec![0]]);
        assert!(matches!(
            tape.neighbor_agg(x, &bad_index, AggregatorKind::Sum),
            Err(TensorError::NeighborIndex { node: 1, neighbor: 3, nodes: 3 })
        ));
        let isolated = Arc::new(vec![vec![1], Vec::new(), vec![0]]);
        assert!(matches!(
            tape.neighbor_agg(x, &isolated, AggregatorKind::Mean),
            Err(TensorError::IsolatedNode { node: 1, .. })
        ));
        // Sum over an empty neighborhood is defined as zero.
        let sum = tape.neighbor_agg(x, &isolated, AggregatorKind::Sum).unwrap();
        assert_eq!(tape.data(sum), &[0.0; 6]);
    }

    #[test]
    fn neighbor_agg_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let x = random_vec(&mut rng, 4 * 3);
        let w = random_vec(&mut rng, 4 * 3);
        let neighbors = Arc::new(vec![vec![1, 3], vec![0, 2], vec![1, 3], vec![0, 2]]);
        for kind in [
            AggregatorKind::Sum,
            AggregatorKind::Mean,
            AggregatorKind::Softmax,
        ] {
            let w_fixed = w.clone();
            let lists = Arc::clone(&neighbors);
            check_grad(
                &mut |tape, leaf| {
                    let w = tape.constant(&[4, 3], w_fixed.clone()).unwrap();
                    let agg = tape.neighbor_agg(leaf, &lists, kind).unwrap();
                    let prod = tape.mul(agg, w).unwrap();
                    sum_all(tape, prod)
                },
                &[4, 3],
                &x,
            );
        }
    }

    #[test]
    fn composed_network_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let x = random_vec(&mut rng, 4);
        let w1 = random_vec(&mut rng, 4 * 3);
        let w2 = random_vec(&mut rng, 3 * 2);
        let w1_fixed = w1;
        let w2_fixed = w2;
        check_grad(
            &mut |tape, leaf| {
                let w1 = tape.constant(&[4, 3], w1_fixed.clone()).unwrap();
                let w2 = tape.constant(&[3, 2], w2_fixed.clone()).unwrap();
                let h = tape.matmul(leaf, w1).unwrap();
                let h = tape.tanh(h).unwrap();
                let out = tape.matmul(h, w2).unwrap();
                let sm = tape.softmax_rows(out).unwrap();
                let picked = tape.cross_entropy_logits(sm, &[1]).unwrap();
                picked
            },
            &[1, 4],
            &x,
        );
    }

    #[test]
    fn identical_runs_produce_identical_gradients() {
        let run = || {
            let mut rng = ChaCha12Rng::seed_from_u64(31);
            let x = random_vec(&mut rng, 3 * 3);
            let mut tape = Tape::new();
            let leaf = tape.leaf(&[3, 3], x, true).unwrap();
            let neighbors = Arc::new(vec![vec![1, 2], vec![0, 2], vec![0, 1]]);
            let agg = tape
                .neighbor_agg(leaf, &neighbors, AggregatorKind::Softmax)
                .unwrap();
            let act = tape.sigmoid(agg).unwrap();
            let loss = sum_all(&mut tape, act);
            tape.backward(loss).unwrap();
            tape.grad(leaf).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        let bits_a: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn neighbor_enumeration_order_is_irrelevant() {
        let x = vec![0.3, -1.2, 0.7, 2.0, -0.4, 0.9];
        let forward = |lists: Vec<Vec<usize>>| {
            let mut tape = Tape::new();
            let leaf = tape.leaf(&[3, 2], x.clone(), false).unwrap();
            let arc = Arc::new(lists);
            let out = tape
                .neighbor_agg(leaf, &arc, AggregatorKind::Softmax)
                .unwrap();
            tape.data(out).to_vec()
        };
        let sorted = forward(vec![vec![1, 2], vec![0, 2], vec![0, 1]]);
        let shuffled = forward(vec![vec![2, 1], vec![2, 0], vec![1, 0]]);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&sorted), bits(&shuffled));
    }
}
