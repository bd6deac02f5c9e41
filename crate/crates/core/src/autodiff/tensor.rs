use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels;
use super::TensorError;
use crate::real::Real;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);
static FINITE_CHECKS: AtomicBool = AtomicBool::new(false);

/// Turns on NaN/Inf detection: every op panics if it produces a
/// non-finite value. Off by default.
pub fn set_finite_checks(enabled: bool) {
    FINITE_CHECKS.store(enabled, Ordering::Relaxed);
}

pub fn finite_checks() -> bool {
    FINITE_CHECKS.load(Ordering::Relaxed)
}

pub(crate) enum Op<R: Real> {
    Add(Tensor<R>, Tensor<R>),
    Sub(Tensor<R>, Tensor<R>),
    Mul(Tensor<R>, Tensor<R>),
    Neg(Tensor<R>),
    Scale(Tensor<R>, R),
    AddScalar(Tensor<R>),
    MatMul(Tensor<R>, Tensor<R>),
    Transpose(Tensor<R>),
    Exp(Tensor<R>),
    Ln(Tensor<R>),
    Tanh(Tensor<R>),
    Recip(Tensor<R>),
    Sqrt(Tensor<R>),
    SumTo(Tensor<R>),
    BroadcastTo(Tensor<R>),
    Softmax(Tensor<R>),
    LogSoftmax(Tensor<R>),
    Concat(Vec<Tensor<R>>, usize),
    Slice(Tensor<R>, usize, usize),
    Unslice(Tensor<R>, usize, usize),
    Gather(Tensor<R>, Rc<[usize]>),
    Scatter(Tensor<R>, Rc<[usize]>),
    Reshape(Tensor<R>),
}

impl<R: Real> Op<R> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Tanh(..) => "tanh",
            Op::Recip(..) => "recip",
            Op::Sqrt(..) => "sqrt",
            Op::SumTo(..) => "sum_to",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Unslice(..) => "unslice",
            Op::Gather(..) => "gather_rows",
            Op::Scatter(..) => "scatter_rows",
            Op::Reshape(..) => "reshape",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<&Tensor<R>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Concat(parts, _) => parts.iter().collect(),
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Tanh(a)
            | Op::Recip(a)
            | Op::Sqrt(a)
            | Op::SumTo(a)
            | Op::BroadcastTo(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Slice(a, ..)
            | Op::Unslice(a, ..)
            | Op::Gather(a, _)
            | Op::Scatter(a, _)
            | Op::Reshape(a) => vec![a],
        }
    }

    fn into_inputs(self, out: &mut Vec<Tensor<R>>) {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
                out.push(a);
                out.push(b);
            }
            Op::Concat(parts, _) => out.extend(parts),
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Tanh(a)
            | Op::Recip(a)
            | Op::Sqrt(a)
            | Op::SumTo(a)
            | Op::BroadcastTo(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Slice(a, ..)
            | Op::Unslice(a, ..)
            | Op::Gather(a, _)
            | Op::Scatter(a, _)
            | Op::Reshape(a) => out.push(a),
        }
    }
}

pub(crate) struct Node<R: Real> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<R>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op<R>>,
}

// Long chains (unrolled inner loops) would otherwise recurse once per node
// when the graph is released.
impl<R: Real> Drop for Node<R> {
    fn drop(&mut self) {
        let mut stack = Vec::new();
        if let Some(op) = self.op.take() {
            op.into_inputs(&mut stack);
        }
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                if let Some(op) = node.op.take() {
                    op.into_inputs(&mut stack);
                }
            }
        }
    }
}

/// Dense row-major tensor participating in a reverse-mode graph.
///
/// Cloning is cheap (reference counted). A graph is confined to the thread
/// that built it; the element buffer itself is shareable via [`Tensor::shared`].
pub struct Tensor<R: Real>(pub(crate) Rc<Node<R>>);

impl<R: Real> Clone for Tensor<R> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<R: Real> fmt::Debug for Tensor<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(Op::name))
            .field("data", &self.0.data)
            .finish()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<R: Real> Tensor<R> {
    fn make(data: Vec<R>, shape: Vec<usize>, requires_grad: bool, op: Option<Op<R>>) -> Self {
        debug_assert_eq!(data.len(), kernels::numel(&shape));
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Arc::new(data),
            requires_grad,
            op,
        }))
    }

    fn from_op(data: Vec<R>, shape: Vec<usize>, op: Op<R>) -> Self {
        if finite_checks() && data.iter().any(|v| !v.is_finite()) {
            panic!("non-finite value produced by `{}`", op.name());
        }
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        if requires_grad {
            Self::make(data, shape, true, Some(op))
        } else {
            Self::make(data, shape, false, None)
        }
    }

    pub fn from_vec(data: Vec<R>, shape: &[usize]) -> Result<Self, TensorError> {
        if data.len() != kernels::numel(shape) {
            return Err(TensorError::Storage {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::make(data, shape.to_vec(), false, None))
    }

    /// Constant view over an existing buffer without copying it.
    pub fn shared(data: Arc<Vec<R>>, shape: &[usize]) -> Result<Self, TensorError> {
        if data.len() != kernels::numel(shape) {
            return Err(TensorError::Storage {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            op: None,
        })))
    }

    /// A differentiable leaf.
    pub fn param(data: Vec<R>, shape: &[usize]) -> Result<Self, TensorError> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.requires_grad_())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::make(
            vec![R::zero(); kernels::numel(shape)],
            shape.to_vec(),
            false,
            None,
        )
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::make(
            vec![R::one(); kernels::numel(shape)],
            shape.to_vec(),
            false,
            None,
        )
    }

    pub fn full(shape: &[usize], value: R) -> Self {
        Self::make(
            vec![value; kernels::numel(shape)],
            shape.to_vec(),
            false,
            None,
        )
    }

    pub fn scalar(value: R) -> Self {
        Self::make(vec![value], Vec::new(), false, None)
    }

    /// New leaf sharing this tensor's values, marked as requiring gradient.
    pub fn requires_grad_(&self) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            requires_grad: true,
            op: None,
        }))
    }

    /// Constant sharing this tensor's values, cut off from the graph.
    pub fn detach(&self) -> Self {
        if !self.requires_grad() {
            return self.clone();
        }
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            requires_grad: false,
            op: None,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[R] {
        &self.0.data
    }

    pub fn buffer(&self) -> Arc<Vec<R>> {
        Arc::clone(&self.0.data)
    }

    pub fn to_vec(&self) -> Vec<R> {
        self.0.data.to_vec()
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

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> R {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.0.data[0]
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.data().iter().position(|v| !v.is_finite()) {
            Some(index) => Err(TensorError::NonFinite { index }),
            None => Ok(()),
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape() {
            [m, n] => Ok((*m, *n)),
            s => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    fn zip_with(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(R, R) -> R,
    ) -> Result<Vec<R>, TensorError> {
        if self.shape() != other.shape() {
            return Err(dim_err(op, self.shape(), other.shape()));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect())
    }

    fn map(&self, f: impl Fn(R) -> R) -> Vec<R> {
        self.data().iter().map(|&a| f(a)).collect()
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        let data = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(Self::from_op(
            data,
            self.shape().to_vec(),
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        let data = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(Self::from_op(
            data,
            self.shape().to_vec(),
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        let data = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(Self::from_op(
            data,
            self.shape().to_vec(),
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    /// Elementwise add with numpy-style broadcasting of either side.
    pub fn add_bcast(&self, other: &Self) -> Result<Self, TensorError> {
        let (a, b) = self.broadcast_pair(other, "add")?;
        a.add(&b)
    }

    pub fn sub_bcast(&self, other: &Self) -> Result<Self, TensorError> {
        let (a, b) = self.broadcast_pair(other, "sub")?;
        a.sub(&b)
    }

    pub fn mul_bcast(&self, other: &Self) -> Result<Self, TensorError> {
        let (a, b) = self.broadcast_pair(other, "mul")?;
        a.mul(&b)
    }

    fn broadcast_pair(&self, other: &Self, op: &'static str) -> Result<(Self, Self), TensorError> {
        if self.shape() == other.shape() {
            Ok((self.clone(), other.clone()))
        } else if kernels::broadcastable(other.shape(), self.shape()) {
            Ok((self.clone(), other.broadcast_to(self.shape())?))
        } else if kernels::broadcastable(self.shape(), other.shape()) {
            Ok((self.broadcast_to(other.shape())?, other.clone()))
        } else {
            Err(dim_err(op, self.shape(), other.shape()))
        }
    }

    pub fn neg(&self) -> Self {
        Self::from_op(
            self.map(|a| -a),
            self.shape().to_vec(),
            Op::Neg(self.clone()),
        )
    }

    pub fn scale(&self, c: R) -> Self {
        Self::from_op(
            self.map(|a| a * c),
            self.shape().to_vec(),
            Op::Scale(self.clone(), c),
        )
    }

    pub fn add_scalar(&self, c: R) -> Self {
        Self::from_op(
            self.map(|a| a + c),
            self.shape().to_vec(),
            Op::AddScalar(self.clone()),
        )
    }

    pub fn square(&self) -> Self {
        self.mul(self).expect("same shape")
    }

    pub fn exp(&self) -> Self {
        Self::from_op(
            self.map(R::exp),
            self.shape().to_vec(),
            Op::Exp(self.clone()),
        )
    }

    pub fn ln(&self) -> Self {
        Self::from_op(self.map(R::ln), self.shape().to_vec(), Op::Ln(self.clone()))
    }

    pub fn tanh(&self) -> Self {
        Self::from_op(
            self.map(R::tanh),
            self.shape().to_vec(),
            Op::Tanh(self.clone()),
        )
    }

    pub fn recip(&self) -> Self {
        Self::from_op(
            self.map(R::recip),
            self.shape().to_vec(),
            Op::Recip(self.clone()),
        )
    }

    pub fn sqrt(&self) -> Self {
        Self::from_op(
            self.map(R::sqrt),
            self.shape().to_vec(),
            Op::Sqrt(self.clone()),
        )
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, TensorError> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(), other.shape()));
        }
        let data = kernels::matmul(self.data(), other.data(), m, k, n);
        Ok(Self::from_op(
            data,
            vec![m, n],
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Self, TensorError> {
        let (m, n) = self.dims2("transpose")?;
        let data = kernels::transpose(self.data(), m, n);
        Ok(Self::from_op(data, vec![n, m], Op::Transpose(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        if kernels::numel(shape) != self.numel() {
            return Err(dim_err("reshape", self.shape(), shape));
        }
        Ok(Self::from_op(
            self.to_vec(),
            shape.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self, TensorError> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        if !kernels::broadcastable(self.shape(), shape) {
            return Err(dim_err("broadcast_to", self.shape(), shape));
        }
        let data = kernels::broadcast_to(self.data(), self.shape(), shape);
        Ok(Self::from_op(
            data,
            shape.to_vec(),
            Op::BroadcastTo(self.clone()),
        ))
    }

    /// Sums broadcast dimensions away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self, TensorError> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        if !kernels::broadcastable(shape, self.shape()) {
            return Err(dim_err("sum_to", self.shape(), shape));
        }
        let data = kernels::sum_to(self.data(), self.shape(), shape);
        Ok(Self::from_op(data, shape.to_vec(), Op::SumTo(self.clone())))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Self {
        self.sum_to(&[]).expect("everything sums to a scalar")
    }

    pub fn mean(&self) -> Self {
        let n = self.numel().max(1);
        self.sum().scale(R::one() / R::of(n as f64))
    }

    fn keepdim_last(&self) -> Vec<usize> {
        let mut shape = self.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        }
        shape
    }

    /// Sum along the last axis, keeping it with length 1.
    pub fn sum_last(&self) -> Self {
        let shape = self.keepdim_last();
        self.sum_to(&shape).expect("last axis reduces")
    }

    pub fn mean_last(&self) -> Self {
        let n = self.shape().last().copied().unwrap_or(1).max(1);
        self.sum_last().scale(R::one() / R::of(n as f64))
    }

    fn last_dim(&self) -> usize {
        self.shape().last().copied().unwrap_or(1)
    }

    /// Softmax along `axis`. Rank-2 tensors accept axis 0 or 1; other ranks
    /// use the last axis.
    pub fn softmax(&self, axis: usize) -> Result<Self, TensorError> {
        if self.rank() == 2 && axis == 0 {
            return self.t()?.softmax_last().t();
        }
        if axis + 1 != self.rank().max(1) {
            return Err(TensorError::Rank {
                op: "softmax",
                expected: axis + 1,
                shape: self.shape().to_vec(),
            });
        }
        Ok(self.softmax_last())
    }

    pub fn softmax_last(&self) -> Self {
        let data = kernels::softmax_rows(self.data(), self.last_dim());
        Self::from_op(data, self.shape().to_vec(), Op::Softmax(self.clone()))
    }

    pub fn log_softmax_last(&self) -> Self {
        let data = kernels::log_softmax_rows(self.data(), self.last_dim());
        Self::from_op(data, self.shape().to_vec(), Op::LogSoftmax(self.clone()))
    }

    pub fn concat(parts: &[Self], axis: usize) -> Result<Self, TensorError> {
        let first = parts
            .first()
            .ok_or(TensorError::Contract("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(TensorError::Rank {
                op: "concat",
                expected: axis + 1,
                shape: first.shape().to_vec(),
            });
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = 0;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(dim_err("concat", first.shape(), p.shape()));
            }
            out_shape[axis] += p.shape()[axis];
        }
        let views: Vec<(&[R], &[usize])> = parts.iter().map(|p| (p.data(), p.shape())).collect();
        let data = kernels::concat(&views, axis, &out_shape);
        Ok(Self::from_op(
            data,
            out_shape,
            Op::Concat(parts.to_vec(), axis),
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self, TensorError> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(TensorError::Index {
                op: "slice",
                index: start + len,
                bound: self.shape().get(axis).copied().unwrap_or(0),
            });
        }
        if start == 0 && len == self.shape()[axis] {
            return Ok(self.clone());
        }
        let data = kernels::slice(self.data(), self.shape(), axis, start, len);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Self::from_op(
            data,
            shape,
            Op::Slice(self.clone(), axis, start),
        ))
    }

    /// Adjoint of [`Tensor::slice`]: embeds this tensor into zeros of
    /// `full` length along `axis`.
    pub(crate) fn unslice(&self, axis: usize, start: usize, full: usize) -> Self {
        let len = self.shape()[axis];
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        let data = kernels::unslice(self.data(), &shape, axis, start, len);
        Self::from_op(data, shape, Op::Unslice(self.clone(), axis, start))
    }

    /// Row lookup into a `[rows×width]` table (embedding lookup).
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Self, TensorError> {
        let (rows, width) = self.dims2("gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let data = kernels::gather_rows(self.data(), width, ids);
        Ok(Self::from_op(
            data,
            vec![ids.len(), width],
            Op::Gather(self.clone(), ids.into()),
        ))
    }

    pub(crate) fn scatter_rows(&self, ids: &Rc<[usize]>, rows: usize) -> Self {
        let width = self.shape()[1];
        let data = kernels::scatter_rows(self.data(), width, ids, rows);
        Self::from_op(
            data,
            vec![rows, width],
            Op::Scatter(self.clone(), Rc::clone(ids)),
        )
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: R) -> Self {
        let centered = self
            .sub_bcast(&self.mean_last())
            .expect("keepdim broadcast");
        let var = centered.square().mean_last();
        let inv_std = var.add_scalar(eps).sqrt().recip();
        centered.mul_bcast(&inv_std).expect("keepdim broadcast")
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Self {
        let c = R::of((2.0 / std::f64::consts::PI).sqrt());
        let cube = self.square().mul(self).expect("same shape");
        let inner = self
            .add(&cube.scale(R::of(0.044715)))
            .expect("same shape")
            .scale(c);
        let gate = inner.tanh().add_scalar(R::one()).scale(R::of(0.5));
        self.mul(&gate).expect("same shape")
    }

    /// Text listing of the graph feeding this tensor, one op per line in
    /// topological order.
    pub fn dump_graph(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for node in super::backward::topo_order(self, false) {
            let inputs: Vec<String> = match &node.0.op {
                Some(op) => op.inputs().iter().map(|t| format!("%{}", t.id())).collect(),
                None => Vec::new(),
            };
            let name = match &node.0.op {
                Some(op) => op.name(),
                None if node.requires_grad() => "param",
                None => "const",
            };
            let _ = writeln!(
                out,
                "%{} = {}({}) {:?}",
                node.id(),
                name,
                inputs.join(", "),
                node.shape()
            );
        }
        out
    }
}
