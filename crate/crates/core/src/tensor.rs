//! Dense 64-bit arrays and a small reverse-mode tape.
//!
//! Every differentiable quantity in the augmentation loop (the perturbation
//! logits, the re-normalized adjacency values, propagated embeddings, scores
//! and the losses) lives on a [`Tape`]. Values are computed eagerly when an op
//! is recorded; [`Tape::backward`] walks the record in reverse and
//! accumulates gradients into every ancestor of a scalar loss.
//!
//! There is no broadcasting: binary elementwise ops require equal shapes.
//!
//! ```
//! use fairaug::tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![0.5, 0.5, 0.5]));
//! let loss = tape.sum(tape.square(x));
//! assert!((loss.scalar() - 0.75).abs() < 1e-15);
//!
//! tape.backward(loss).unwrap();
//! assert_eq!(x.grad().data(), &[1.0, 1.0, 1.0]);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("buffer of length {len} cannot be viewed as {rows}x{cols}")]
    BadBuffer { len: usize, rows: usize, cols: usize },
    #[error("index {index} out of range for length {len} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
}

/// Row-major dense matrix of `f64`. Vectors are `n x 1`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if rows * cols != data.len() {
            return Err(TensorError::BadBuffer {
                len: data.len(),
                rows,
                cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Column vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::vector(vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.cols != other.cols {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            for c in 0..other.rows {
                out.data[r * other.rows + c] = dot(a, other.row(c));
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `1/sqrt(x)`, with `0` mapped to `0` so isolated nodes get an all-zero row.
pub fn rsqrt(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        1.0 / x.sqrt()
    }
}

/// `|x| / (1 + |x|)`, a bounded squashing function on `[0, 1)`.
pub fn soft_bound(x: f64) -> f64 {
    x.abs() / (1.0 + x.abs())
}

/// Off-diagonal sparsity pattern of a symmetric `dim x dim` operator.
///
/// Entry `e = (r, c)` with value `v_e` contributes `v_e` at both `(r, c)` and
/// `(c, r)`. Entries must satisfy `r != c`; repeated pairs are summed.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricPattern {
    dim: usize,
    entries: Vec<(usize, usize)>,
}

impl SymmetricPattern {
    pub fn new(dim: usize, entries: Vec<(usize, usize)>) -> Result<Self, TensorError> {
        for &(r, c) in &entries {
            let bad = r.max(c);
            if bad >= dim {
                return Err(TensorError::IndexOutOfRange {
                    op: "symmetric_pattern",
                    index: bad,
                    len: dim,
                });
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `S · x` for the symmetric operator `S` described by `pattern` and `values`.
///
/// Accumulation follows entry order, so the result is bit-reproducible.
pub fn sym_spmm(
    pattern: &SymmetricPattern,
    values: &[f64],
    x: &Tensor,
) -> Result<Tensor, TensorError> {
    if values.len() != pattern.len() {
        return Err(TensorError::ShapeMismatch {
            op: "sym_spmm(values)",
            left: (pattern.len(), 1),
            right: (values.len(), 1),
        });
    }
    if x.rows != pattern.dim {
        return Err(TensorError::ShapeMismatch {
            op: "sym_spmm",
            left: (pattern.dim, pattern.dim),
            right: x.shape(),
        });
    }
    let d = x.cols;
    let mut out = Tensor::zeros(x.rows, d);
    for (&(r, c), &v) in pattern.entries.iter().zip(values) {
        for k in 0..d {
            out.data[r * d + k] += v * x.data[c * d + k];
        }
        for k in 0..d {
            out.data[c * d + k] += v * x.data[r * d + k];
        }
    }
    Ok(out)
}

/// A differentiable op implemented outside this module.
///
/// `backward` receives the input values, the forward output and the gradient
/// flowing into the output, and returns one gradient per input (same shapes
/// as the inputs).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Square(usize),
    Rsqrt(usize),
    SoftBound(usize),
    Sum(usize),
    Mean(usize),
    SelectRows(usize, Rc<[usize]>),
    Gather(usize, Rc<[usize]>),
    ScatterAdd(usize, Rc<[usize]>),
    Concat(usize, usize),
    SymSpmm {
        values: usize,
        dense: usize,
        pattern: Rc<SymmetricPattern>,
    },
    Custom {
        inputs: Vec<usize>,
        op: Rc<dyn CustomOp>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Records differentiable computations.
///
/// A tape is single-threaded and meant to be rebuilt for every evaluation of
/// a loss; gradients persist across [`Tape::backward`] calls until
/// [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    /// Value of a `1 x 1` node (first element otherwise).
    pub fn scalar(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data[0]
    }

    /// Accumulated gradient; zeros if nothing has flowed here yet.
    pub fn grad(&self) -> Tensor {
        let (r, c) = self.shape();
        self.tape
            .grads
            .borrow()
            .get(self.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(r, c))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn check_indices(op: &'static str, indices: &[usize], len: usize) -> Result<(), TensorError> {
    if let Some(&index) = indices.iter().find(|&&i| i >= len) {
        return Err(TensorError::IndexOutOfRange { op, index, len });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn val(&self, v: Var<'_>) -> Rc<Tensor> {
        debug_assert!(std::ptr::eq(self, v.tape), "var belongs to another tape");
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Input node. Constants are leaves whose gradient is simply ignored.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn matmul<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>, TensorError> {
        let out = self.val(a).matmul(&self.val(b))?;
        Ok(self.push(out, Op::MatMul(a.id, b.id)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>, TensorError> {
        let out = self.val(a).matmul_t(&self.val(b))?;
        Ok(self.push(out, Op::MatMulT(a.id, b.id)))
    }

    fn zip_with(
        &self,
        op: &'static str,
        a: Var<'_>,
        b: Var<'_>,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (va, vb) = (self.val(a), self.val(b));
        same_shape(op, &va, &vb)?;
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.rows, va.cols, data)
    }

    pub fn add<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>, TensorError> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a.id, b.id)))
    }

    pub fn sub<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>, TensorError> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a.id, b.id)))
    }

    /// Elementwise product.
    pub fn mul<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>, TensorError> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a.id, b.id)))
    }

    pub fn scale<'a>(&'a self, a: Var<'a>, c: f64) -> Var<'a> {
        let out = self.val(a).scaled(c);
        self.push(out, Op::Scale(a.id, c))
    }

    pub fn sigmoid<'a>(&'a self, a: Var<'a>) -> Var<'a> {
        let out = self.val(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a.id))
    }

    pub fn square<'a>(&'a self, a: Var<'a>) -> Var<'a> {
        let out = self.val(a).map(|v| v * v);
        self.push(out, Op::Square(a.id))
    }

    /// Elementwise `1/sqrt(x)` with `rsqrt(0) = 0` (and zero gradient there).
    pub fn rsqrt<'a>(&'a self, a: Var<'a>) -> Var<'a> {
        let out = self.val(a).map(rsqrt);
        self.push(out, Op::Rsqrt(a.id))
    }

    /// Elementwise `|x|/(1+|x|)`.
    pub fn soft_bound<'a>(&'a self, a: Var<'a>) -> Var<'a> {
        let out = self.val(a).map(soft_bound);
        self.push(out, Op::SoftBound(a.id))
    }

    pub fn sum<'a>(&'a self, a: Var<'a>) -> Var<'a> {
        let out = Tensor::scalar(self.val(a).data.iter().sum());
        self.push(out, Op::Sum(a.id))
    }

    /// Mean of all entries; the mean of an empty tensor is 0.
    pub fn mean<'a>(&'a self, a: Var<'a>) -> Var<'a> {
        let v = self.val(a);
        let m = if v.is_empty() {
            0.0
        } else {
            v.data.iter().sum::<f64>() / v.len() as f64
        };
        self.push(Tensor::scalar(m), Op::Mean(a.id))
    }

    pub fn select_rows<'a>(
        &'a self,
        a: Var<'a>,
        indices: &[usize],
    ) -> Result<Var<'a>, TensorError> {
        let v = self.val(a);
        check_indices("select_rows", indices, v.rows)?;
        let out = v.select_rows(indices);
        Ok(self.push(out, Op::SelectRows(a.id, indices.into())))
    }

    /// Picks flat (row-major) elements into a column vector.
    pub fn gather<'a>(&'a self, a: Var<'a>, indices: &[usize]) -> Result<Var<'a>, TensorError> {
        let v = self.val(a);
        check_indices("gather", indices, v.len())?;
        let out = Tensor::vector(indices.iter().map(|&i| v.data[i]).collect());
        Ok(self.push(out, Op::Gather(a.id, indices.into())))
    }

    /// `out[indices[j]] += a[j]` into a zero column vector of length `len`.
    pub fn scatter_add<'a>(
        &'a self,
        a: Var<'a>,
        indices: &[usize],
        len: usize,
    ) -> Result<Var<'a>, TensorError> {
        let v = self.val(a);
        if indices.len() != v.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add",
                left: v.shape(),
                right: (indices.len(), 1),
            });
        }
        check_indices("scatter_add", indices, len)?;
        let mut out = Tensor::zeros(len, 1);
        for (&i, &x) in indices.iter().zip(&v.data) {
            out.data[i] += x;
        }
        Ok(self.push(out, Op::ScatterAdd(a.id, indices.into())))
    }

    /// Stacks `b` below `a`; column counts must agree.
    pub fn concat<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>, TensorError> {
        let (va, vb) = (self.val(a), self.val(b));
        if va.cols != vb.cols {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(&va.data);
        data.extend_from_slice(&vb.data);
        let out = Tensor::from_vec(va.rows + vb.rows, va.cols, data)?;
        Ok(self.push(out, Op::Concat(a.id, b.id)))
    }

    /// Sparse symmetric operator times dense matrix, differentiable in both
    /// the operator values (a column vector, one per pattern entry) and the
    /// dense input.
    pub fn sym_spmm<'a>(
        &'a self,
        pattern: &Rc<SymmetricPattern>,
        values: Var<'a>,
        dense: Var<'a>,
    ) -> Result<Var<'a>, TensorError> {
        let out = sym_spmm(pattern, self.val(values).data(), &self.val(dense))?;
        Ok(self.push(
            out,
            Op::SymSpmm {
                values: values.id,
                dense: dense.id,
                pattern: pattern.clone(),
            },
        ))
    }

    /// Records an externally defined op whose forward value was computed by
    /// the caller.
    pub fn custom<'a>(&'a self, op: Rc<dyn CustomOp>, inputs: &[Var<'a>], value: Tensor) -> Var<'a> {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.id).collect(),
                op,
            },
        )
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Back-propagates `d loss / d node` into every ancestor of `loss`,
    /// adding to gradients left by earlier calls.
    pub fn backward(&self, loss: Var<'_>) -> Result<(), TensorError> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape();
        if shape != (1, 1) {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut local: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        local[loss.id] = Some(Tensor::scalar(1.0));

        fn acc(local: &mut [Option<Tensor>], id: usize, g: Tensor) {
            match &mut local[id] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &nodes[id];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let ga = g.matmul_t(vb)?;
                    let gb = va.transpose().matmul(&g)?;
                    acc(&mut local, *a, ga);
                    acc(&mut local, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let ga = g.matmul(vb)?;
                    let gb = g.transpose().matmul(va)?;
                    acc(&mut local, *a, ga);
                    acc(&mut local, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut local, *a, g.clone());
                    acc(&mut local, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut local, *b, g.scaled(-1.0));
                    acc(&mut local, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let ga = zip(&g, vb, |x, y| x * y);
                    let gb = zip(&g, va, |x, y| x * y);
                    acc(&mut local, *a, ga);
                    acc(&mut local, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut local, *a, g.scaled(*c)),
                Op::Sigmoid(a) => {
                    let ga = zip(&g, out, |x, s| x * s * (1.0 - s));
                    acc(&mut local, *a, ga);
                }
                Op::Square(a) => {
                    let ga = zip(&g, &nodes[*a].value, |x, v| 2.0 * x * v);
                    acc(&mut local, *a, ga);
                }
                Op::Rsqrt(a) => {
                    // d/dx x^{-1/2} = -1/2 x^{-3/2} = -1/2 r^3
                    let ga = zip(&g, out, |x, r| -0.5 * x * r * r * r);
                    acc(&mut local, *a, ga);
                }
                Op::SoftBound(a) => {
                    let ga = zip(&g, &nodes[*a].value, |x, v| {
                        let d = 1.0 + v.abs();
                        x * v.signum() / (d * d)
                    });
                    acc(&mut local, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    acc(&mut local, *a, Tensor::filled(r, c, g.data[0]));
                }
                Op::Mean(a) => {
                    let v = &nodes[*a].value;
                    let n = v.len().max(1) as f64;
                    acc(&mut local, *a, Tensor::filled(v.rows, v.cols, g.data[0] / n));
                }
                Op::SelectRows(a, idx) => {
                    let v = &nodes[*a].value;
                    let mut ga = Tensor::zeros(v.rows, v.cols);
                    for (j, &i) in idx.iter().enumerate() {
                        for (dst, src) in ga.row_mut(i).iter_mut().zip(g.row(j)) {
                            *dst += src;
                        }
                    }
                    acc(&mut local, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let v = &nodes[*a].value;
                    let mut ga = Tensor::zeros(v.rows, v.cols);
                    for (j, &i) in idx.iter().enumerate() {
                        ga.data[i] += g.data[j];
                    }
                    acc(&mut local, *a, ga);
                }
                Op::ScatterAdd(a, idx) => {
                    let v = &nodes[*a].value;
                    let data = idx.iter().map(|&i| g.data[i]).collect();
                    acc(&mut local, *a, Tensor::from_vec(v.rows, v.cols, data)?);
                }
                Op::Concat(a, b) => {
                    let va = &nodes[*a].value;
                    let vb = &nodes[*b].value;
                    let split = va.len();
                    let ga = Tensor::from_vec(va.rows, va.cols, g.data[..split].to_vec())?;
                    let gb = Tensor::from_vec(vb.rows, vb.cols, g.data[split..].to_vec())?;
                    acc(&mut local, *a, ga);
                    acc(&mut local, *b, gb);
                }
                Op::SymSpmm {
                    values,
                    dense,
                    pattern,
                } => {
                    let vals = &nodes[*values].value;
                    let x = &nodes[*dense].value;
                    // S is symmetric, so d/dx = S g.
                    let gx = sym_spmm(pattern, vals.data(), &g)?;
                    let gv: Vec<f64> = pattern
                        .entries()
                        .iter()
                        .map(|&(r, c)| dot(g.row(r), x.row(c)) + dot(g.row(c), x.row(r)))
                        .collect();
                    acc(&mut local, *values, Tensor::from_vec(vals.rows, vals.cols, gv)?);
                    acc(&mut local, *dense, gx);
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&i| &*nodes[i].value).collect();
                    let grads = op.backward(&values, out, &g);
                    assert_eq!(
                        grads.len(),
                        inputs.len(),
                        "custom op {} returned the wrong number of gradients",
                        op.name()
                    );
                    for (&i, gi) in inputs.iter().zip(grads) {
                        assert_eq!(
                            gi.shape(),
                            nodes[i].value.shape(),
                            "custom op {} returned a mis-shaped gradient",
                            op.name()
                        );
                        acc(&mut local, i, gi);
                    }
                }
            }
            local[id] = Some(g);
        }

        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize(nodes.len(), None);
        }
        for (id, g) in local.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut grads[id] {
                    Some(existing) => existing.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// `f` builds a scalar loss from the leaf holding `x`. For every coordinate in
/// `coords` the numeric derivative is `(f(x + eps e_k) - f(x - eps e_k)) / 2eps`,
/// evaluated on fresh tapes (forward values only). Returns the maximum of
/// `|g_analytic - g_numeric| / max(1, |g_numeric|)`.
pub fn finite_difference_check<F>(
    f: F,
    x: &Tensor,
    eps: f64,
    coords: &[usize],
) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TensorError::InvalidStep(eps));
    }
    check_indices("finite_difference_check", coords, x.len())?;

    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let loss = f(&tape, leaf)?;
    tape.backward(loss)?;
    let analytic = leaf.grad();

    let eval = |point: Tensor| -> Result<f64, TensorError> {
        let t = Tape::new();
        let l = t.leaf(point);
        let out = f(&t, l)?;
        Ok(out.scalar())
    };

    let mut worst = 0.0f64;
    for &k in coords {
        let mut plus = x.clone();
        plus.data[k] += eps;
        let mut minus = x.clone();
        minus.data[k] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data[k] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(x);
        assert_eq!(s.scalar(), 0.5);
        tape.backward(s).unwrap();
        assert_eq!(x.grad().data(), &[0.25]);
    }

    #[test]
    fn identity_matmul() {
        let m = Tensor::from_vec(3, 2, vec![1.0, -2.0, 3.5, 0.0, 7.0, 1e-3]).unwrap();
        let tape = Tape::new();
        let i = tape.leaf(Tensor::identity(3));
        let mv = tape.leaf(m.clone());
        let out = tape.matmul(i, mv).unwrap();
        assert_eq!(*out.value(), m);
    }

    #[test]
    fn sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5; 3]));
        assert_eq!(tape.sum(tape.square(x)).scalar(), 0.75);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0, 0.0, 9.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(x.grad().data(), &[1.0; 5]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.sum(tape.square(x));
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().data(), &[4.0, 8.0]);
        tape.zero_grad();
        assert_eq!(x.grad().data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3) vs (2, 3)"));
        assert!(tape.add(a, tape.leaf(Tensor::zeros(3, 2))).is_err());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(tape.backward(x), Err(TensorError::NonScalarLoss((2, 1))));
    }

    #[test]
    fn rsqrt_of_zero_is_zero_with_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 4.0]));
        let r = tape.rsqrt(x);
        assert_eq!(r.value().data(), &[0.0, 0.5]);
        tape.backward(tape.sum(r)).unwrap();
        assert_eq!(x.grad().data()[0], 0.0);
        assert!((x.grad().data()[1] + 0.5 * 0.125).abs() < 1e-15);
    }

    #[test]
    fn quadratic_form_matches_closed_form() {
        // f(x) = xᵀ M x, grad = (M + Mᵀ) x
        let m = Tensor::from_vec(3, 3, vec![2.0, 1.0, 0.0, -1.0, 3.0, 0.5, 0.0, 0.25, 1.0]).unwrap();
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let err = finite_difference_check(
            |t, v| {
                let mv = t.matmul(t.leaf(m.clone()), v)?;
                Ok(t.sum(t.mul(v, mv)?))
            },
            &x,
            1e-5,
            &[0, 1, 2],
        )
        .unwrap();
        assert!(err < 1e-7, "err = {err}");

        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let mv = tape.matmul(tape.leaf(m.clone()), v).unwrap();
        let loss = tape.sum(tape.mul(v, mv).unwrap());
        tape.backward(loss).unwrap();
        let closed = m.matmul(&x).unwrap();
        let closed_t = m.transpose().matmul(&x).unwrap();
        for k in 0..3 {
            let want = closed.data()[k] + closed_t.data()[k];
            assert!((v.grad().data()[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = finite_difference_check(
            |t, v| {
                let z = t.scale(v, 0.0);
                Ok(t.sum(z))
            },
            &x,
            1e-5,
            &[0, 1],
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn zero_step_is_rejected() {
        let x = Tensor::vector(vec![1.0]);
        let res = finite_difference_check(|t, v| Ok(t.sum(v)), &x, 0.0, &[0]);
        assert_eq!(res, Err(TensorError::InvalidStep(0.0)));
    }

    #[test]
    fn sym_spmm_matches_dense_product() {
        let pattern = SymmetricPattern::new(3, vec![(0, 1), (0, 2)]).unwrap();
        let x = Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = sym_spmm(&pattern, &[0.5, 2.0], &x).unwrap();
        let dense =
            Tensor::from_vec(3, 3, vec![0.0, 0.5, 2.0, 0.5, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        assert_eq!(out, dense.matmul(&x).unwrap());
    }
}
