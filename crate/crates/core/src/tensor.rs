//! Dense `f64` tensors and a single-use reverse-mode gradient tape.
//!
//! Parameters and data live in [`Tensor`] values outside any tape. A training
//! step creates a fresh [`Tape`], registers the tensors it needs as leaves,
//! builds the forward graph through the tape's primitive methods and finally
//! calls [`Tape::backward`] once. The tape is consumed by that call.
//!
//! Shapes never broadcast implicitly. The only exception is a binary
//! elementwise op where one operand holds exactly one element.

use std::sync::atomic::{AtomicU32, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to logarithm arguments and L2 norms.
pub const STABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not describe {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected a rank-2 operand, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: operand at or below the stability floor")]
    BelowFloor { op: &'static str },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    StaleTape,
    #[error("variable belongs to a different tape")]
    ForeignVar,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default, skip_serializing)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        ensure_finite("tensor", &data)?;
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    /// Builds a `rows × cols` matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    /// Column vector `n × 1`.
    pub fn column(values: &[f64]) -> Result<Self> {
        Self::matrix(values.len(), 1, values.to_vec())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Replaces the values, keeping the shape. Rejects non-finite input.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(TensorError::DataLength {
                shape: self.shape.clone(),
                len: data.len(),
            });
        }
        ensure_finite("set_data", &data)?;
        self.data = data;
        Ok(())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(TensorError::DataLength {
                    shape: self.shape.clone(),
                    len: g.len(),
                });
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Rows selected by index, as a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![indices.len(), c],
            data,
            requires_grad: false,
            grad: None,
        }
    }
}

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Tanh(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    Transpose(usize),
    Reshape(usize),
    AddRow(usize, usize),
    RowL2Normalize(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    GatherDiagonal(usize),
    GatherCols(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
        end: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` requires grad.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_deref())
    }

    /// Stores the gradient of `var` into `tensor.grad`.
    pub fn write_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        tensor.set_grad(self.get(var).map(<[f64]>::to_vec))
    }
}

/// Eager, single-use record of primitive operations.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn binary_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || numel(b) == 1 {
        Ok(a.to_vec())
    } else if numel(a) == 1 {
        Ok(b.to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        })
    }
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() == 2 {
        Ok((shape[0], shape[1]))
    } else {
        Err(TensorError::NotMatrix {
            op,
            shape: shape.to_vec(),
        })
    }
}

#[inline]
fn pick(values: &[f64], i: usize) -> f64 {
    if values.len() == 1 {
        values[0]
    } else {
        values[i]
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl Fn(usize) -> f64) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    for (i, b) in buf.iter_mut().enumerate() {
        *b += f(i);
    }
}

/// Adds `contribution` (length `out_len`) into an operand slot that may be a
/// broadcast scalar.
fn accumulate_broadcast(slot: &mut Option<Vec<f64>>, operand_len: usize, contribution: &[f64]) {
    if operand_len == contribution.len() {
        accumulate(slot, operand_len, |i| contribution[i]);
    } else {
        let total: f64 = contribution.iter().sum();
        accumulate(slot, 1, |_| total);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Number of nodes recorded so far, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if self.consumed {
            return Err(TensorError::StaleTape);
        }
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index]
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::StaleTape);
        }
        ensure_finite(op_name, &value)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::AddRow(a, b) => {
                self.nodes[*a].requires_grad || self.nodes[*b].requires_grad
            }
            Op::Concat(parts, _) => parts.iter().any(|&p| self.nodes[p].requires_grad),
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::RowL2Normalize(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::GatherDiagonal(a)
            | Op::GatherCols(a, _)
            | Op::Slice { input: a, .. } => self.nodes[*a].requires_grad,
        };
        // Ops on constants are stored as constants; nothing to replay.
        let op = if requires_grad { op } else { Op::Leaf };
        let index = self.nodes.len();
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Ok(Var { tape: self.id, index })
    }

    /// Registers a tensor as a leaf; it requires grad iff the tensor does.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.leaf_with(tensor, tensor.requires_grad)
    }

    /// Registers a tensor as a leaf that never receives gradient.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.leaf_with(tensor, false)
    }

    fn leaf_with(&mut self, tensor: &Tensor, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            shape: tensor.shape.clone(),
            value: tensor.data.clone(),
            requires_grad,
            op: Op::Leaf,
        });
        Var { tape: self.id, index }
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        let t = Tensor::scalar(value)?;
        Ok(self.constant(&t))
    }

    /// Copy of `v`'s value as a constant leaf.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let a = self.idx(v)?;
        let (shape, value) = (self.nodes[a].shape.clone(), self.nodes[a].value.clone());
        self.push("detach", shape, value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "item() on a tensor of shape {:?}", n.shape);
        n.value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (n, k) = matrix_dims("matmul", &self.nodes[ia].shape)?;
        let (k2, m) = matrix_dims("matmul", &self.nodes[ib].shape)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.nodes[ia].shape.clone(),
                right: self.nodes[ib].shape.clone(),
            });
        }
        let out = matmul_raw(&self.nodes[ia].value, &self.nodes[ib].value, n, k, m);
        self.push("matmul", vec![n, m], out, Op::MatMul(ia, ib))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(usize, usize, Vec<usize>, Vec<f64>)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let shape = binary_shape(name, &self.nodes[ia].shape, &self.nodes[ib].shape)?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let out = (0..numel(&shape)).map(|i| f(pick(va, i), pick(vb, i))).collect();
        Ok((ia, ib, shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, shape, out) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", shape, out, Op::Add(ia, ib))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, shape, out) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", shape, out, Op::Sub(ia, ib))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, shape, out) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", shape, out, Op::Mul(ia, ib))
    }

    /// Elementwise quotient. Denominators with magnitude below the
    /// stability floor are rejected.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let ib = self.idx(b)?;
        if self.nodes[ib].value.iter().any(|v| v.abs() < STABILITY_FLOOR) {
            return Err(TensorError::BelowFloor { op: "div" });
        }
        let (ia, ib, shape, out) = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", shape, out, Op::Div(ia, ib))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Result<(usize, Vec<usize>, Vec<f64>)> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.iter().map(|&x| f(x)).collect();
        Ok((ia, self.nodes[ia].shape.clone(), out))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let (ia, shape, out) = self.unary(a, |x| -x)?;
        self.push("neg", shape, out, Op::Neg(ia))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let (ia, shape, out) = self.unary(a, |x| c * x)?;
        self.push("scale", shape, out, Op::Scale(ia, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let (ia, shape, out) = self.unary(a, |x| x + c)?;
        self.push("add_scalar", shape, out, Op::AddScalar(ia))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let (ia, shape, out) = self.unary(a, f64::exp)?;
        self.push("exp", shape, out, Op::Exp(ia))
    }

    /// `ln(max(x, floor))`. Negative arguments are an error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        if self.nodes[ia].value.iter().any(|&x| x < 0.0) {
            return Err(TensorError::BelowFloor { op: "log" });
        }
        let (ia, shape, out) = self.unary(a, |x| x.max(STABILITY_FLOOR).ln())?;
        self.push("log", shape, out, Op::Log(ia))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (ia, shape, out) = self.unary(a, |x| x.max(0.0))?;
        self.push("relu", shape, out, Op::Relu(ia))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let (ia, shape, out) = self.unary(a, f64::tanh)?;
        self.push("tanh", shape, out, Op::Tanh(ia))
    }

    /// `min(x, ceiling)`.
    pub fn clamp_max(&mut self, a: Var, ceiling: f64) -> Result<Var> {
        self.clamp(a, f64::NEG_INFINITY, ceiling)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (ia, shape, out) = self.unary(a, |x| x.clamp(lo, hi))?;
        self.push("clamp", shape, out, Op::Clamp(ia, lo, hi))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(ia))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let n = self.nodes[ia].value.len();
        if n == 0 {
            return Err(TensorError::DataLength {
                shape: self.nodes[ia].shape.clone(),
                len: 0,
            });
        }
        let s: f64 = self.nodes[ia].value.iter().sum();
        self.push("mean", Vec::new(), vec![s / n as f64], Op::Mean(ia))
    }

    /// Sums a matrix along `axis`: 0 gives `1 × cols`, 1 gives `rows × 1`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let (n, m) = matrix_dims("sum_axis", &self.nodes[ia].shape)?;
        let v = &self.nodes[ia].value;
        let (shape, out) = match axis {
            0 => {
                let mut out = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        out[j] += v[i * m + j];
                    }
                }
                (vec![1, m], out)
            }
            1 => (vec![n, 1], (0..n).map(|i| v[i * m..(i + 1) * m].iter().sum()).collect()),
            _ => {
                return Err(TensorError::IndexOutOfRange {
                    op: "sum_axis",
                    index: axis,
                    extent: 2,
                })
            }
        };
        self.push("sum_axis", shape, out, Op::SumAxis(ia, axis))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (n, m) = matrix_dims("transpose", &self.nodes[ia].shape)?;
        let v = &self.nodes[ia].value;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = v[i * m + j];
            }
        }
        self.push("transpose", vec![m, n], out, Op::Transpose(ia))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.idx(a)?;
        if numel(&shape) != self.nodes[ia].value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.nodes[ia].shape.clone(),
                right: shape,
            });
        }
        let out = self.nodes[ia].value.clone();
        self.push("reshape", shape, out, Op::Reshape(ia))
    }

    /// `x[n × m] + b[1 × m]`, the bias add of a dense layer.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let (n, m) = matrix_dims("add_row", &self.nodes[ix].shape)?;
        if self.nodes[ib].shape != [1, m] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.nodes[ix].shape.clone(),
                right: self.nodes[ib].shape.clone(),
            });
        }
        let (vx, vb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let out = (0..n * m).map(|k| vx[k] + vb[k % m]).collect();
        self.push("add_row", vec![n, m], out, Op::AddRow(ix, ib))
    }

    /// Divides each row by `max(‖row‖₂, floor)`.
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (n, m) = matrix_dims("row_l2_normalize", &self.nodes[ia].shape)?;
        let v = &self.nodes[ia].value;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &v[i * m..(i + 1) * m];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(STABILITY_FLOOR);
            for j in 0..m {
                out[i * m + j] = row[j] / norm;
            }
        }
        self.push("row_l2_normalize", vec![n, m], out, Op::RowL2Normalize(ia))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (n, m) = matrix_dims("softmax_rows", &self.nodes[ia].shape)?;
        let out = softmax_rows_raw(&self.nodes[ia].value, n, m);
        self.push("softmax_rows", vec![n, m], out, Op::SoftmaxRows(ia))
    }

    /// Row-wise `x − logsumexp(x)`, computed with the max shift.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (n, m) = matrix_dims("log_softmax_rows", &self.nodes[ia].shape)?;
        let out = log_softmax_rows_raw(&self.nodes[ia].value, n, m);
        self.push("log_softmax_rows", vec![n, m], out, Op::LogSoftmaxRows(ia))
    }

    /// Diagonal of a square matrix as an `n × 1` column.
    pub fn gather_diagonal(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (n, m) = matrix_dims("gather_diagonal", &self.nodes[ia].shape)?;
        if n != m {
            return Err(TensorError::ShapeMismatch {
                op: "gather_diagonal",
                left: vec![n],
                right: vec![m],
            });
        }
        let v = &self.nodes[ia].value;
        let out = (0..n).map(|i| v[i * n + i]).collect();
        self.push("gather_diagonal", vec![n, 1], out, Op::GatherDiagonal(ia))
    }

    /// `out[i] = x[i, columns[i]]` as an `n × 1` column.
    pub fn gather_cols(&mut self, a: Var, columns: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let (n, m) = matrix_dims("gather_cols", &self.nodes[ia].shape)?;
        if columns.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "gather_cols",
                left: vec![n],
                right: vec![columns.len()],
            });
        }
        if let Some(&bad) = columns.iter().find(|&&c| c >= m) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_cols",
                index: bad,
                extent: m,
            });
        }
        let v = &self.nodes[ia].value;
        let out = columns.iter().enumerate().map(|(i, &c)| v[i * m + c]).collect();
        self.push("gather_cols", vec![n, 1], out, Op::GatherCols(ia, columns.to_vec()))
    }

    /// Concatenates matrices along `axis` (0 stacks rows, 1 stacks columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::DataLength { shape: vec![0], len: 0 });
        }
        if axis > 1 {
            return Err(TensorError::IndexOutOfRange {
                op: "concat",
                index: axis,
                extent: 2,
            });
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let dims: Vec<(usize, usize)> = idx
            .iter()
            .map(|&i| matrix_dims("concat", &self.nodes[i].shape))
            .collect::<Result<_>>()?;
        let (n0, m0) = dims[0];
        for &(n, m) in &dims[1..] {
            let ok = if axis == 0 { m == m0 } else { n == n0 };
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: vec![n0, m0],
                    right: vec![n, m],
                });
            }
        }
        let (shape, out) = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * m0);
            for &i in &idx {
                out.extend_from_slice(&self.nodes[i].value);
            }
            (vec![rows, m0], out)
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(n0 * cols);
            for r in 0..n0 {
                for (&i, &(_, m)) in idx.iter().zip(&dims) {
                    out.extend_from_slice(&self.nodes[i].value[r * m..(r + 1) * m]);
                }
            }
            (vec![n0, cols], out)
        };
        self.push("concat", shape, out, Op::Concat(idx, axis))
    }

    /// Half-open range `start..end` along `axis` of a matrix.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let (n, m) = matrix_dims("slice", &self.nodes[ia].shape)?;
        let extent = match axis {
            0 => n,
            1 => m,
            _ => {
                return Err(TensorError::IndexOutOfRange {
                    op: "slice",
                    index: axis,
                    extent: 2,
                })
            }
        };
        if start > end || end > extent {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: end.max(start),
                extent,
            });
        }
        let v = &self.nodes[ia].value;
        let (shape, out) = if axis == 0 {
            (vec![end - start, m], v[start * m..end * m].to_vec())
        } else {
            let mut out = Vec::with_capacity(n * (end - start));
            for r in 0..n {
                out.extend_from_slice(&v[r * m + start..r * m + end]);
            }
            (vec![n, end - start], out)
        };
        let op = Op::Slice {
            input: ia,
            axis,
            start,
            end,
        };
        self.push("slice", shape, out, op)
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[root].shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Leaves that need grad but were unreachable get explicit zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        // Only leaves keep gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                grads[i] = None;
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let m = nodes[*b].shape[1];
                if wants(*a) {
                    let bv = &nodes[*b].value;
                    let mut ga = vec![0.0; n * k];
                    for r in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for c in 0..m {
                                s += g[r * m + c] * bv[p * m + c];
                            }
                            ga[r * k + p] = s;
                        }
                    }
                    accumulate(&mut grads[*a], n * k, |t| ga[t]);
                }
                if wants(*b) {
                    let av = &nodes[*a].value;
                    let mut gb = vec![0.0; k * m];
                    for r in 0..n {
                        for p in 0..k {
                            let x = av[r * k + p];
                            for c in 0..m {
                                gb[p * m + c] += x * g[r * m + c];
                            }
                        }
                    }
                    accumulate(&mut grads[*b], k * m, |t| gb[t]);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    accumulate_broadcast(&mut grads[*a], nodes[*a].value.len(), g);
                }
                if wants(*b) {
                    let c: Vec<f64> = g.iter().map(|x| sign * x).collect();
                    accumulate_broadcast(&mut grads[*b], nodes[*b].value.len(), &c);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                if wants(*a) {
                    let c: Vec<f64> = g.iter().enumerate().map(|(t, x)| x * pick(vb, t)).collect();
                    accumulate_broadcast(&mut grads[*a], va.len(), &c);
                }
                if wants(*b) {
                    let c: Vec<f64> = g.iter().enumerate().map(|(t, x)| x * pick(va, t)).collect();
                    accumulate_broadcast(&mut grads[*b], vb.len(), &c);
                }
            }
            Op::Div(a, b) => {
                let vb = &nodes[*b].value;
                let out = &node.value;
                if wants(*a) {
                    let c: Vec<f64> = g.iter().enumerate().map(|(t, x)| x / pick(vb, t)).collect();
                    accumulate_broadcast(&mut grads[*a], nodes[*a].value.len(), &c);
                }
                if wants(*b) {
                    let c: Vec<f64> = g.iter().enumerate().map(|(t, x)| -x * out[t] / pick(vb, t)).collect();
                    accumulate_broadcast(&mut grads[*b], vb.len(), &c);
                }
            }
            Op::Neg(a) => accumulate(&mut grads[*a], g.len(), |t| -g[t]),
            Op::Scale(a, c) => accumulate(&mut grads[*a], g.len(), |t| c * g[t]),
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(&mut grads[*a], g.len(), |t| g[t]),
            Op::Exp(a) => accumulate(&mut grads[*a], g.len(), |t| g[t] * node.value[t]),
            Op::Log(a) => {
                let x = &nodes[*a].value;
                accumulate(&mut grads[*a], g.len(), |t| {
                    if x[t] > STABILITY_FLOOR {
                        g[t] / x[t]
                    } else {
                        0.0
                    }
                })
            }
            Op::Relu(a) => {
                let x = &nodes[*a].value;
                accumulate(&mut grads[*a], g.len(), |t| if x[t] > 0.0 { g[t] } else { 0.0 })
            }
            Op::Tanh(a) => accumulate(&mut grads[*a], g.len(), |t| {
                g[t] * (1.0 - node.value[t] * node.value[t])
            }),
            Op::Clamp(a, lo, hi) => {
                let x = &nodes[*a].value;
                accumulate(&mut grads[*a], g.len(), |t| {
                    if (*lo..=*hi).contains(&x[t]) {
                        g[t]
                    } else {
                        0.0
                    }
                })
            }
            Op::Sum(a) => accumulate(&mut grads[*a], nodes[*a].value.len(), |_| g[0]),
            Op::Mean(a) => {
                let n = nodes[*a].value.len();
                accumulate(&mut grads[*a], n, |_| g[0] / n as f64)
            }
            Op::SumAxis(a, axis) => {
                let (n, m) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                if *axis == 0 {
                    accumulate(&mut grads[*a], n * m, |t| g[t % m])
                } else {
                    accumulate(&mut grads[*a], n * m, |t| g[t / m])
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                // input (r, c) <- output (c, r)
                accumulate(&mut grads[*a], n * m, |t| g[(t % m) * n + t / m])
            }
            Op::AddRow(x, b) => {
                let (n, m) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                if wants(*x) {
                    accumulate(&mut grads[*x], n * m, |t| g[t]);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; m];
                    for r in 0..n {
                        for c in 0..m {
                            gb[c] += g[r * m + c];
                        }
                    }
                    accumulate(&mut grads[*b], m, |t| gb[t]);
                }
            }
            Op::RowL2Normalize(a) => {
                let (n, m) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let x = &nodes[*a].value;
                let y = &node.value;
                let mut ga = vec![0.0; n * m];
                for r in 0..n {
                    let row = r * m..(r + 1) * m;
                    let norm = x[row.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > STABILITY_FLOOR {
                        let dot: f64 = row.clone().map(|t| y[t] * g[t]).sum();
                        for t in row {
                            ga[t] = (g[t] - y[t] * dot) / norm;
                        }
                    } else {
                        for t in row {
                            ga[t] = g[t] / STABILITY_FLOOR;
                        }
                    }
                }
                accumulate(&mut grads[*a], n * m, |t| ga[t]);
            }
            Op::SoftmaxRows(a) => {
                let (n, m) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let s = &node.value;
                let mut ga = vec![0.0; n * m];
                for r in 0..n {
                    let row = r * m..(r + 1) * m;
                    let dot: f64 = row.clone().map(|t| g[t] * s[t]).sum();
                    for t in row {
                        ga[t] = s[t] * (g[t] - dot);
                    }
                }
                accumulate(&mut grads[*a], n * m, |t| ga[t]);
            }
            Op::LogSoftmaxRows(a) => {
                let (n, m) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let ls = &node.value;
                let mut ga = vec![0.0; n * m];
                for r in 0..n {
                    let row = r * m..(r + 1) * m;
                    let gsum: f64 = g[row.clone()].iter().sum();
                    for t in row {
                        ga[t] = g[t] - ls[t].exp() * gsum;
                    }
                }
                accumulate(&mut grads[*a], n * m, |t| ga[t]);
            }
            Op::GatherDiagonal(a) => {
                let n = nodes[*a].shape[0];
                accumulate(&mut grads[*a], n * n, |t| if t / n == t % n { g[t / n] } else { 0.0 })
            }
            Op::GatherCols(a, cols) => {
                let (n, m) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                accumulate(
                    &mut grads[*a],
                    n * m,
                    |t| if cols[t / m] == t % m { g[t / m] } else { 0.0 },
                )
            }
            Op::Concat(parts, axis) => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        if wants(p) {
                            accumulate(&mut grads[p], len, |t| g[offset + t]);
                        }
                        offset += len;
                    }
                } else {
                    let cols: usize = parts.iter().map(|&p| nodes[p].shape[1]).sum();
                    let mut offset = 0;
                    for &p in parts {
                        let (n, m) = (nodes[p].shape[0], nodes[p].shape[1]);
                        if wants(p) {
                            accumulate(&mut grads[p], n * m, |t| g[(t / m) * cols + offset + t % m]);
                        }
                        offset += m;
                    }
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                end,
            } => {
                let (n, m) = (nodes[*input].shape[0], nodes[*input].shape[1]);
                let (start, end) = (*start, *end);
                if *axis == 0 {
                    accumulate(&mut grads[*input], n * m, |t| {
                        let r = t / m;
                        if r >= start && r < end {
                            g[t - start * m]
                        } else {
                            0.0
                        }
                    })
                } else {
                    let w = end - start;
                    accumulate(&mut grads[*input], n * m, |t| {
                        let c = t % m;
                        if c >= start && c < end {
                            g[(t / m) * w + c - start]
                        } else {
                            0.0
                        }
                    })
                }
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        for p in 0..k {
            let x = a[r * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let orow = &mut out[r * m..(r + 1) * m];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

pub(crate) fn softmax_rows_raw(v: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let row = &v[r * m..(r + 1) * m];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..m {
            let e = (row[j] - max).exp();
            out[r * m + j] = e;
            z += e;
        }
        for j in 0..m {
            out[r * m + j] /= z;
        }
    }
    out
}

pub(crate) fn log_softmax_rows_raw(v: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let row = &v[r * m..(r + 1) * m];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        for j in 0..m {
            out[r * m + j] = row[j] - lse;
        }
    }
    out
}
