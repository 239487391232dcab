//! Dense 2-D f64 tensors with tape-based reverse-mode differentiation.
//!
//! Every tensor is a node in an implicit expression graph: leaves hold data,
//! interior nodes remember the op and their parents. Calling
//! [`Tensor::backward`] on a scalar walks the reachable graph once in
//! reverse creation order and accumulates gradients into every node. The
//! graph is rebuilt on each forward pass; parameters are long-lived leaves
//! whose buffers the optimizer edits in place between passes.
//!
//! Graphs are confined to one thread (`Rc` interior), no op mutates its
//! inputs, and forward evaluation is deterministic given identical buffers.

use std::cell::{Cell, Ref, RefCell};
use std::collections::BTreeMap;
use std::collections::HashSet;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("loss must be a 1x1 scalar, got {shape:?}")]
    NonScalarLoss { shape: (usize, usize) },
    #[error("backward was already run from this node; rebuild the graph first")]
    BackwardConsumed,
    #[error("invalid argument for {op}: {detail}")]
    BadDimension { op: &'static str, detail: String },
}

type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    AddScalar(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    MulRow(Tensor, Tensor),
    MulScalar(Tensor, Tensor),
    Scale(Tensor, f64),
    Shift(Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Relu(Tensor),
    Tanh(Tensor),
    Sigmoid(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Powf(Tensor, f64),
    Softmax(Tensor),
    LayerNorm(Tensor),
    Mean(Tensor),
    Sum(Tensor),
    ConcatRows(Vec<Tensor>),
    ConcatCols(Vec<Tensor>),
    Slice {
        src: Tensor,
        r0: usize,
        c0: usize,
    },
    Reshape(Tensor),
    RepeatRows(Tensor, usize),
    TileRows(Tensor, usize),
    TopKMask {
        src: Tensor,
        mask: Vec<f64>,
    },
    Clamp {
        src: Tensor,
        lo: f64,
        hi: f64,
    },
    Maximum(Tensor, Tensor),
}

struct Node {
    id: u64,
    rows: usize,
    cols: usize,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Vec<f64>>,
    op: Op,
    consumed: Cell<bool>,
}

/// A reference-counted handle to one node of the expression graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("data", &self.0.data.borrow())
            .finish()
    }
}

/// Variance guard inside layer normalisation. Small enough that the output
/// variance of any non-degenerate row is 1 to better than 1e-9, large
/// enough to keep constant rows finite.
pub const LAYER_NORM_EPS: f64 = 1e-12;

impl Tensor {
    fn make(rows: usize, cols: usize, data: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor(Rc::new(Node {
            id: fresh_id(),
            rows,
            cols,
            grad: RefCell::new(vec![0.0; data.len()]),
            data: RefCell::new(data),
            op,
            consumed: Cell::new(false),
        }))
    }

    // ---------------------------------------------------------------
    // constructors
    // ---------------------------------------------------------------

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::make(rows, cols, vec![0.0; rows * cols], Op::Leaf)
    }

    pub fn ones(rows: usize, cols: usize) -> Tensor {
        Tensor::make(rows, cols, vec![1.0; rows * cols], Op::Leaf)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::make(1, 1, vec![v], Op::Leaf)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(TensorError::BadDimension {
                op: "from_vec",
                detail: format!("{} values for a {}x{} tensor", data.len(), rows, cols),
            });
        }
        Ok(Tensor::make(rows, cols, data, Op::Leaf))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::BadDimension {
                    op: "from_rows",
                    detail: format!("ragged rows: {} vs {}", row.len(), c),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor::make(r, c, data, Op::Leaf))
    }

    /// New leaf holding a copy of this tensor's current values.
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.rows(), self.cols(), self.value(), Op::Leaf)
    }

    // ---------------------------------------------------------------
    // accessors
    // ---------------------------------------------------------------

    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn cols(&self) -> usize {
        self.0.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.0.rows, self.0.cols)
    }

    pub fn len(&self) -> usize {
        self.0.rows * self.0.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Copy of the current values, row-major.
    pub fn value(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.0.data.borrow()[i * self.0.cols + j]
    }

    /// Scalar value of a 1x1 tensor. Panics on any other shape; use
    /// [`Tensor::backward`] for the checked loss path.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() needs a 1x1 tensor");
        self.0.data.borrow()[0]
    }

    /// Gradient accumulated by the last backward pass, row-major.
    pub fn grad(&self) -> Vec<f64> {
        self.0.grad.borrow().clone()
    }

    /// Scale the accumulated gradient in place (global-norm clipping).
    pub fn scale_grad(&self, s: f64) {
        self.0.grad.borrow_mut().iter_mut().for_each(|g| *g *= s);
    }

    /// Overwrite the values of a leaf in place (optimizer updates).
    pub fn set_data(&self, values: &[f64]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    /// Apply `f` to every stored value in place.
    pub fn update_data(&self, f: impl FnMut(&mut f64)) {
        self.0.data.borrow_mut().iter_mut().for_each(f);
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    // ---------------------------------------------------------------
    // elementwise unary ops
    // ---------------------------------------------------------------

    fn unary(&self, f: impl Fn(f64) -> f64, op: impl FnOnce(Tensor) -> Op) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::make(self.rows(), self.cols(), data, op(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|v| v.max(0.0), Op::Relu)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(|v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, Op::Exp)
    }

    /// Natural logarithm. Values must be strictly positive.
    pub fn log(&self) -> Tensor {
        self.unary(f64::ln, Op::Log)
    }

    /// Elementwise power with a constant exponent.
    pub fn powf(&self, e: f64) -> Tensor {
        self.unary(|v| v.powf(e), |t| Op::Powf(t, e))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.unary(|v| v * s, |t| Op::Scale(t, s))
    }

    pub fn shift(&self, c: f64) -> Tensor {
        self.unary(|v| v + c, |t| Op::Shift(t))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Clamp values to `[lo, hi]`; gradient passes only through the
    /// interior (boundary values included).
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(|v| v.clamp(lo, hi), |t| Op::Clamp { src: t, lo, hi })
    }

    // ---------------------------------------------------------------
    // elementwise binary ops, with row and scalar broadcasting
    // ---------------------------------------------------------------

    fn broadcast_kind(
        &self,
        other: &Tensor,
        op: &'static str,
    ) -> Result<BroadcastKind> {
        if self.shape() == other.shape() {
            Ok(BroadcastKind::Same)
        } else if other.shape() == (1, 1) {
            Ok(BroadcastKind::Scalar)
        } else if other.rows() == 1 && other.cols() == self.cols() {
            Ok(BroadcastKind::Row)
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            })
        }
    }

    /// Elementwise sum. `other` may share the shape, be a `1xC` row
    /// (broadcast down the rows), or be a `1x1` scalar.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (r, c) = self.shape();
        match self.broadcast_kind(other, "add")? {
            BroadcastKind::Same => {
                let data = zip_map(&self.data(), &other.data(), |a, b| a + b);
                Ok(Tensor::make(r, c, data, Op::Add(self.clone(), other.clone())))
            }
            BroadcastKind::Row => {
                let a = self.data();
                let b = other.data();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        data.push(a[i * c + j] + b[j]);
                    }
                }
                Ok(Tensor::make(r, c, data, Op::AddRow(self.clone(), other.clone())))
            }
            BroadcastKind::Scalar => {
                let s = other.at(0, 0);
                let data = self.data().iter().map(|&v| v + s).collect();
                Ok(Tensor::make(
                    r,
                    c,
                    data,
                    Op::AddScalar(self.clone(), other.clone()),
                ))
            }
        }
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = zip_map(&self.data(), &other.data(), |a, b| a - b);
        Ok(Tensor::make(
            self.rows(),
            self.cols(),
            data,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    /// Elementwise product with the same broadcasting rules as [`Tensor::add`].
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (r, c) = self.shape();
        match self.broadcast_kind(other, "mul")? {
            BroadcastKind::Same => {
                let data = zip_map(&self.data(), &other.data(), |a, b| a * b);
                Ok(Tensor::make(r, c, data, Op::Mul(self.clone(), other.clone())))
            }
            BroadcastKind::Row => {
                let a = self.data();
                let b = other.data();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        data.push(a[i * c + j] * b[j]);
                    }
                }
                Ok(Tensor::make(r, c, data, Op::MulRow(self.clone(), other.clone())))
            }
            BroadcastKind::Scalar => {
                let s = other.at(0, 0);
                let data = self.data().iter().map(|&v| v * s).collect();
                Ok(Tensor::make(
                    r,
                    c,
                    data,
                    Op::MulScalar(self.clone(), other.clone()),
                ))
            }
        }
    }

    /// Elementwise maximum. Gradient follows the larger operand and is
    /// split evenly on exact ties.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "maximum",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = zip_map(&self.data(), &other.data(), f64::max);
        Ok(Tensor::make(
            self.rows(),
            self.cols(),
            data,
            Op::Maximum(self.clone(), other.clone()),
        ))
    }

    // ---------------------------------------------------------------
    // linear algebra and structure
    // ---------------------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols() != other.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (r, k, c) = (self.rows(), self.cols(), other.cols());
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for t in 0..k {
                let av = a[i * k + t];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[t * c..(t + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] += av * brow[j];
                }
            }
        }
        Ok(Tensor::make(r, c, out, Op::MatMul(self.clone(), other.clone())))
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.shape();
        let a = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        Tensor::make(c, r, out, Op::Transpose(self.clone()))
    }

    /// Row-wise softmax, numerically stabilised by a per-row max shift.
    pub fn softmax(&self) -> Tensor {
        let (r, c) = self.shape();
        let a = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &a[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        Tensor::make(r, c, out, Op::Softmax(self.clone()))
    }

    /// Row-wise normalisation to mean 0 and variance 1 (no affine terms).
    pub fn layer_norm(&self) -> Tensor {
        let (r, c) = self.shape();
        let a = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &a[i * c..(i + 1) * c];
            let (mu, var) = row_mean_var(row);
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mu) * inv;
            }
        }
        Tensor::make(r, c, out, Op::LayerNorm(self.clone()))
    }

    /// Mean over all entries, as a 1x1 tensor.
    pub fn mean(&self) -> Tensor {
        let s = self.data().iter().sum::<f64>() / self.len() as f64;
        Tensor::make(1, 1, vec![s], Op::Mean(self.clone()))
    }

    /// Sum over all entries, as a 1x1 tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum::<f64>();
        Tensor::make(1, 1, vec![s], Op::Sum(self.clone()))
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::BadDimension {
                op: "concat_rows",
                detail: "no tensors given".into(),
            });
        }
        let c = parts[0].cols();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: parts[0].shape(),
                    right: p.shape(),
                });
            }
            rows += p.rows();
        }
        let mut data = Vec::with_capacity(rows * c);
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        Ok(Tensor::make(rows, c, data, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::BadDimension {
                op: "concat_cols",
                detail: "no tensors given".into(),
            });
        }
        let r = parts[0].rows();
        let mut cols = 0;
        for p in parts {
            if p.rows() != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: parts[0].shape(),
                    right: p.shape(),
                });
            }
            cols += p.cols();
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for p in parts {
                let pc = p.cols();
                data.extend_from_slice(&p.data()[i * pc..(i + 1) * pc]);
            }
        }
        Ok(Tensor::make(r, cols, data, Op::ConcatCols(parts.to_vec())))
    }

    /// Copy of the sub-block `rows r0..r1`, `cols c0..c1`.
    pub fn slice(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<Tensor> {
        if r1 > self.rows() || c1 > self.cols() || r0 >= r1 || c0 >= c1 {
            return Err(TensorError::BadDimension {
                op: "slice",
                detail: format!(
                    "range {}..{} x {}..{} of a {}x{} tensor",
                    r0,
                    r1,
                    c0,
                    c1,
                    self.rows(),
                    self.cols()
                ),
            });
        }
        let (sr, sc) = (r1 - r0, c1 - c0);
        let a = self.data();
        let mut data = Vec::with_capacity(sr * sc);
        for i in r0..r1 {
            data.extend_from_slice(&a[i * self.cols() + c0..i * self.cols() + c1]);
        }
        Ok(Tensor::make(
            sr,
            sc,
            data,
            Op::Slice {
                src: self.clone(),
                r0,
                c0,
            },
        ))
    }

    pub fn row(&self, i: usize) -> Result<Tensor> {
        self.slice(i, i + 1, 0, self.cols())
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor> {
        if rows * cols != self.len() {
            return Err(TensorError::BadDimension {
                op: "reshape",
                detail: format!(
                    "cannot view {}x{} as {}x{}",
                    self.rows(),
                    self.cols(),
                    rows,
                    cols
                ),
            });
        }
        Ok(Tensor::make(rows, cols, self.value(), Op::Reshape(self.clone())))
    }

    /// Each row repeated `k` times consecutively: `(r, c)` becomes `(r*k, c)`.
    pub fn repeat_rows(&self, k: usize) -> Tensor {
        let (r, c) = self.shape();
        let a = self.data();
        let mut data = Vec::with_capacity(r * k * c);
        for i in 0..r {
            for _ in 0..k {
                data.extend_from_slice(&a[i * c..(i + 1) * c]);
            }
        }
        Tensor::make(r * k, c, data, Op::RepeatRows(self.clone(), k))
    }

    /// The whole block stacked `k` times: `(r, c)` becomes `(r*k, c)`.
    pub fn tile_rows(&self, k: usize) -> Tensor {
        let (r, c) = self.shape();
        let a = self.data();
        let mut data = Vec::with_capacity(r * k * c);
        for _ in 0..k {
            data.extend_from_slice(&a);
        }
        Tensor::make(r * k, c, data, Op::TileRows(self.clone(), k))
    }

    /// Keep the `k` largest entries of each row and zero the rest. The
    /// selection itself is treated as a constant: gradient flows straight
    /// through the kept entries and not at all through the mask. Ties are
    /// broken toward the lower column index.
    pub fn top_k_mask(&self, k: usize) -> Result<Tensor> {
        if k == 0 {
            return Err(TensorError::BadDimension {
                op: "top_k_mask",
                detail: "k must be at least 1".into(),
            });
        }
        let (r, c) = self.shape();
        let a = self.data();
        let mut mask = vec![0.0; r * c];
        let mut order: Vec<usize> = Vec::with_capacity(c);
        for i in 0..r {
            let row = &a[i * c..(i + 1) * c];
            order.clear();
            order.extend(0..c);
            order.sort_by(|&x, &y| row[y].partial_cmp(&row[x]).unwrap().then(x.cmp(&y)));
            for &j in order.iter().take(k.min(c)) {
                mask[i * c + j] = 1.0;
            }
        }
        let data: Vec<f64> = a.iter().zip(&mask).map(|(v, m)| v * m).collect();
        drop(a);
        Ok(Tensor::make(
            r,
            c,
            data,
            Op::TopKMask {
                src: self.clone(),
                mask,
            },
        ))
    }

    // ---------------------------------------------------------------
    // backward
    // ---------------------------------------------------------------

    /// Reverse-mode sweep from a scalar. Zeroes the gradients of every
    /// reachable node first, so repeated forward/backward cycles need no
    /// explicit gradient reset. A second call from the same node errors.
    pub fn backward(&self) -> Result<()> {
        if self.shape() != (1, 1) {
            return Err(TensorError::NonScalarLoss { shape: self.shape() });
        }
        if self.0.consumed.replace(true) {
            return Err(TensorError::BackwardConsumed);
        }

        // Reachable nodes in reverse creation order; parents are always
        // created before children, so descending id is a valid reverse
        // topological order.
        let mut stack = vec![self.clone()];
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor> = Vec::new();
        seen.insert(self.0.id);
        while let Some(t) = stack.pop() {
            for p in t.parents() {
                if seen.insert(p.0.id) {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        for n in &nodes {
            n.0.grad.borrow_mut().fill(0.0);
        }
        self.0.grad.borrow_mut()[0] = 1.0;

        for n in &nodes {
            n.backprop_step();
        }
        Ok(())
    }

    fn parents(&self) -> Vec<&Tensor> {
        match &self.0.op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::AddScalar(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulRow(a, b)
            | Op::MulScalar(a, b)
            | Op::MatMul(a, b)
            | Op::Maximum(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Powf(a, _)
            | Op::Softmax(a)
            | Op::LayerNorm(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::Reshape(a)
            | Op::RepeatRows(a, _)
            | Op::TileRows(a, _) => vec![a],
            Op::ConcatRows(ps) | Op::ConcatCols(ps) => ps.iter().collect(),
            Op::Slice { src, .. } | Op::TopKMask { src, .. } | Op::Clamp { src, .. } => {
                vec![src]
            }
        }
    }

    fn backprop_step(&self) {
        let g = self.0.grad.borrow().clone();
        let (r, c) = self.shape();
        match &self.0.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(a, &g);
                accumulate(b, &g);
            }
            Op::AddRow(a, b) => {
                accumulate(a, &g);
                let mut gb = b.0.grad.borrow_mut();
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += g[i * c + j];
                    }
                }
            }
            Op::AddScalar(a, b) => {
                accumulate(a, &g);
                b.0.grad.borrow_mut()[0] += g.iter().sum::<f64>();
            }
            Op::Sub(a, b) => {
                accumulate(a, &g);
                let mut gb = b.0.grad.borrow_mut();
                for (gb_i, g_i) in gb.iter_mut().zip(&g) {
                    *gb_i -= g_i;
                }
            }
            Op::Mul(a, b) => {
                {
                    let bd = b.data();
                    let mut ga = a.0.grad.borrow_mut();
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                let ad = a.data();
                let mut gb = b.0.grad.borrow_mut();
                for i in 0..g.len() {
                    gb[i] += g[i] * ad[i];
                }
            }
            Op::MulRow(a, b) => {
                {
                    let bd = b.data();
                    let mut ga = a.0.grad.borrow_mut();
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[i * c + j] * bd[j];
                        }
                    }
                }
                let ad = a.data();
                let mut gb = b.0.grad.borrow_mut();
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += g[i * c + j] * ad[i * c + j];
                    }
                }
            }
            Op::MulScalar(a, b) => {
                let s = b.at(0, 0);
                {
                    let mut ga = a.0.grad.borrow_mut();
                    for i in 0..g.len() {
                        ga[i] += g[i] * s;
                    }
                }
                let ad = a.data();
                let dot: f64 = g.iter().zip(ad.iter()).map(|(x, y)| x * y).sum();
                b.0.grad.borrow_mut()[0] += dot;
            }
            Op::Scale(a, s) => {
                let mut ga = a.0.grad.borrow_mut();
                for i in 0..g.len() {
                    ga[i] += g[i] * s;
                }
            }
            Op::Shift(a) => accumulate(a, &g),
            Op::MatMul(a, b) => {
                let (ar, k) = a.shape();
                let bc = b.cols();
                {
                    // dA = G B^T
                    let bd = b.data();
                    let mut ga = a.0.grad.borrow_mut();
                    for i in 0..ar {
                        for t in 0..k {
                            let mut s = 0.0;
                            for j in 0..bc {
                                s += g[i * bc + j] * bd[t * bc + j];
                            }
                            ga[i * k + t] += s;
                        }
                    }
                }
                // dB = A^T G
                let ad = a.data();
                let mut gb = b.0.grad.borrow_mut();
                for t in 0..k {
                    for i in 0..ar {
                        let av = ad[i * k + t];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..bc {
                            gb[t * bc + j] += av * g[i * bc + j];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let mut ga = a.0.grad.borrow_mut();
                // self is (r, c) = (a.cols, a.rows)
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
            Op::Relu(a) => {
                let ad = a.data();
                let mut ga = a.0.grad.borrow_mut();
                for i in 0..g.len() {
                    if ad[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Tanh(a) => {
                let y = self.data();
                let mut ga = a.0.grad.borrow_mut();
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Sigmoid(a) => {
                let y = self.data();
                let mut ga = a.0.grad.borrow_mut();
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Exp(a) => {
                let y = self.data();
                let mut ga = a.0.grad.borrow_mut();
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i];
                }
            }
            Op::Log(a) => {
                let ad = a.data();
                let mut ga = a.0.grad.borrow_mut();
                for i in 0..g.len() {
                    ga[i] += g[i] / ad[i];
                }
            }
            Op::Powf(a, e) => {
                let ad = a.data();
                let mut ga = a.0.grad.borrow_mut();
                for i in 0..g.len() {
                    ga[i] += g[i] * e * ad[i].powf(e - 1.0);
                }
            }
            Op::Softmax(a) => {
                let y = self.data();
                let mut ga = a.0.grad.borrow_mut();
                for i in 0..r {
                    let yrow = &y[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let dot: f64 = yrow.iter().zip(grow).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        ga[i * c + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LayerNorm(a) => {
                let ad = a.data();
                let y = self.data();
                let mut ga = a.0.grad.borrow_mut();
                for i in 0..r {
                    let row = &ad[i * c..(i + 1) * c];
                    let (_, var) = row_mean_var(row);
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let yrow = &y[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let gmean = grow.iter().sum::<f64>() / c as f64;
                    let gydot =
                        grow.iter().zip(yrow).map(|(x, y)| x * y).sum::<f64>() / c as f64;
                    for j in 0..c {
                        ga[i * c + j] += inv * (grow[j] - gmean - yrow[j] * gydot);
                    }
                }
            }
            Op::Mean(a) => {
                let s = g[0] / a.len() as f64;
                let mut ga = a.0.grad.borrow_mut();
                for v in ga.iter_mut() {
                    *v += s;
                }
            }
            Op::Sum(a) => {
                let s = g[0];
                let mut ga = a.0.grad.borrow_mut();
                for v in ga.iter_mut() {
                    *v += s;
                }
            }
            Op::ConcatRows(ps) => {
                let mut off = 0;
                for p in ps {
                    let n = p.len();
                    accumulate_slice(p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::ConcatCols(ps) => {
                let mut coff = 0;
                for p in ps {
                    let pc = p.cols();
                    let mut gp = p.0.grad.borrow_mut();
                    for i in 0..r {
                        for j in 0..pc {
                            gp[i * pc + j] += g[i * c + coff + j];
                        }
                    }
                    coff += pc;
                }
            }
            Op::Slice { src, r0, c0 } => {
                let sc = src.cols();
                let mut gs = src.0.grad.borrow_mut();
                for i in 0..r {
                    for j in 0..c {
                        gs[(r0 + i) * sc + (c0 + j)] += g[i * c + j];
                    }
                }
            }
            Op::Reshape(a) => accumulate(a, &g),
            Op::RepeatRows(a, k) => {
                let ac = a.cols();
                let mut ga = a.0.grad.borrow_mut();
                for i in 0..a.rows() {
                    for t in 0..*k {
                        let src = (i * k + t) * ac;
                        for j in 0..ac {
                            ga[i * ac + j] += g[src + j];
                        }
                    }
                }
            }
            Op::TileRows(a, k) => {
                let an = a.len();
                let mut ga = a.0.grad.borrow_mut();
                for t in 0..*k {
                    for i in 0..an {
                        ga[i] += g[t * an + i];
                    }
                }
            }
            Op::TopKMask { src, mask } => {
                let mut gs = src.0.grad.borrow_mut();
                for i in 0..g.len() {
                    gs[i] += g[i] * mask[i];
                }
            }
            Op::Clamp { src, lo, hi } => {
                let sd = src.data();
                let mut gs = src.0.grad.borrow_mut();
                for i in 0..g.len() {
                    if sd[i] >= *lo && sd[i] <= *hi {
                        gs[i] += g[i];
                    }
                }
            }
            Op::Maximum(a, b) => {
                {
                    let ad = a.data();
                    let bd = b.data();
                    let mut ga = a.0.grad.borrow_mut();
                    for i in 0..g.len() {
                        if ad[i] > bd[i] {
                            ga[i] += g[i];
                        } else if ad[i] == bd[i] {
                            ga[i] += 0.5 * g[i];
                        }
                    }
                }
                let ad = a.data();
                let bd = b.data();
                let mut gb = b.0.grad.borrow_mut();
                for i in 0..g.len() {
                    if bd[i] > ad[i] {
                        gb[i] += g[i];
                    } else if ad[i] == bd[i] {
                        gb[i] += 0.5 * g[i];
                    }
                }
            }
        }
    }
}

enum BroadcastKind {
    Same,
    Row,
    Scalar,
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(t: &Tensor, g: &[f64]) {
    let mut gt = t.0.grad.borrow_mut();
    for (gt_i, g_i) in gt.iter_mut().zip(g) {
        *gt_i += g_i;
    }
}

fn accumulate_slice(t: &Tensor, g: &[f64]) {
    accumulate(t, g)
}

fn row_mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var)
}

// -------------------------------------------------------------------
// parameter registry
// -------------------------------------------------------------------

/// Named collection of learnable leaf tensors.
///
/// Iteration is always in sorted-name order, which keeps every reduction
/// over parameters (gradient norms, optimizer sweeps) deterministic.
#[derive(Default, Clone)]
pub struct ParamRegistry {
    map: BTreeMap<String, Tensor>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    /// Fetch a parameter that must exist; panics with the name otherwise.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Independent copy: fresh leaves holding the same values.
    pub fn clone_detached(&self) -> ParamRegistry {
        let mut out = ParamRegistry::new();
        for (name, t) in &self.map {
            out.insert(name.clone(), t.detach());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }
}

// -------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    /// Central-difference check of d(loss)/d(leaf) for every coordinate.
    fn fd_check(leaf: &Tensor, loss_fn: impl Fn() -> Tensor, tol: f64) {
        let loss = loss_fn();
        loss.backward().unwrap();
        let analytic = leaf.grad();
        let h = 1e-5;
        let base = leaf.value();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            leaf.set_data(&plus);
            let lp = loss_fn().item();
            let mut minus = base.clone();
            minus[i] -= h;
            leaf.set_data(&minus);
            let lm = loss_fn().item();
            leaf.set_data(&base);
            let fd = (lp - lm) / (2.0 * h);
            let err = (analytic[i] - fd).abs();
            let scale = analytic[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                err < 1e-9 || err / scale < tol,
                "coord {i}: analytic {} vs fd {}",
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn shape_errors_are_reported_with_both_shapes() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(3, 2);
        let cases: Vec<(&str, Result<Tensor>)> = vec![
            ("add", a.add(&b)),
            ("sub", a.sub(&b)),
            ("mul", a.mul(&b)),
            ("maximum", a.maximum(&b)),
            ("matmul", a.matmul(&a)),
            ("concat_rows", Tensor::concat_rows(&[a.clone(), b.clone()])),
            ("concat_cols", Tensor::concat_cols(&[a.clone(), b.clone()])),
        ];
        for (name, r) in cases {
            match r {
                Err(TensorError::ShapeMismatch { left, right, .. }) => {
                    let msg = TensorError::ShapeMismatch {
                        op: "x",
                        left,
                        right,
                    }
                    .to_string();
                    assert!(msg.contains("(2, 3)") || msg.contains("(3, 2)"), "{name}");
                }
                other => panic!("{name}: expected ShapeMismatch, got {other:?}"),
            }
        }
    }

    #[test]
    fn matmul_known_product() {
        let a = t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.value(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = t(3, 4, &[0.1, -2.0, 3.0, 0.5, 1.0, 1.0, 1.0, 1.0, -5.0, 9.0, 0.0, 2.5]);
        let s = a.softmax();
        for i in 0..3 {
            let row_sum: f64 = (0..4).map(|j| s.at(i, j)).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let a = t(1, 3, &[1.0, 2.0, 3.0]);
        let y = a.layer_norm();
        let vals = y.value();
        let mean = vals.iter().sum::<f64>() / 3.0;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn top_k_mask_keeps_largest_and_blocks_masked_grads() {
        let a = t(2, 4, &[0.9, 0.1, 0.5, 0.3, -1.0, -0.2, -0.5, -0.9]);
        let m = a.top_k_mask(2).unwrap();
        assert_eq!(m.value(), vec![0.9, 0.0, 0.5, 0.0, 0.0, -0.2, -0.5, 0.0]);
        let loss = m.sum();
        loss.backward().unwrap();
        assert_eq!(a.grad(), vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let a = t(1, 2, &[1.0, 2.0]);
        let loss = a.mul(&a).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(loss.backward(), Err(TensorError::BackwardConsumed));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let a = Tensor::ones(2, 2);
        assert!(matches!(
            a.backward(),
            Err(TensorError::NonScalarLoss { shape: (2, 2) })
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let a = t(2, 2, &[0.3, -1.2, 2.2, 0.7]);
            let b = t(2, 2, &[1.1, 0.4, -0.6, 1.9]);
            a.matmul(&b).unwrap().tanh().layer_norm().softmax().value()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn grad_matmul_chain() {
        let w = t(3, 2, &[0.3, -0.8, 1.2, 0.4, -0.5, 0.9]);
        let x = t(2, 3, &[0.5, 1.5, -0.7, 0.2, -1.1, 0.8]);
        fd_check(&w, || x.matmul(&w).unwrap().tanh().mean(), 1e-5);
        fd_check(&x, || x.matmul(&w).unwrap().tanh().mean(), 1e-5);
    }

    #[test]
    fn grad_softmax_layer_norm() {
        let x = t(2, 4, &[0.3, -0.9, 1.4, 0.2, -0.4, 0.8, 0.1, -1.3]);
        fd_check(&x, || x.softmax().mul(&x.softmax()).unwrap().sum(), 1e-5);
        fd_check(&x, || x.layer_norm().exp().mean(), 1e-5);
    }

    #[test]
    fn grad_broadcasts_and_elementwise() {
        let x = t(3, 2, &[0.4, -0.2, 1.1, 0.9, -0.6, 0.3]);
        let row = t(1, 2, &[0.7, -0.4]);
        let s = Tensor::scalar(1.3);
        fd_check(&x, || x.add(&row).unwrap().sigmoid().sum(), 1e-5);
        fd_check(&row, || x.add(&row).unwrap().sigmoid().sum(), 1e-5);
        fd_check(&x, || x.mul(&row).unwrap().exp().mean(), 1e-5);
        fd_check(&row, || x.mul(&row).unwrap().exp().mean(), 1e-5);
        fd_check(&s, || x.mul(&s).unwrap().tanh().sum(), 1e-5);
        fd_check(&x, || x.mul(&x).unwrap().sum(), 1e-5);
    }

    #[test]
    fn grad_structural_ops() {
        let x = t(2, 3, &[0.5, -0.3, 0.8, 1.2, 0.1, -0.9]);
        let y = t(2, 3, &[0.2, 0.4, -0.6, 0.3, 1.0, 0.7]);
        fd_check(&x, || {
            Tensor::concat_cols(&[x.clone(), y.clone()])
                .unwrap()
                .tanh()
                .sum()
        }, 1e-5);
        fd_check(&x, || {
            Tensor::concat_rows(&[x.clone(), y.clone()])
                .unwrap()
                .sigmoid()
                .mean()
        }, 1e-5);
        fd_check(&x, || x.slice(0, 2, 1, 3).unwrap().exp().sum(), 1e-5);
        fd_check(&x, || x.transpose().matmul(&y).unwrap().sum(), 1e-5);
        fd_check(&x, || x.repeat_rows(3).tanh().sum(), 1e-5);
        fd_check(&x, || x.tile_rows(2).sigmoid().mean(), 1e-5);
        fd_check(&x, || x.reshape(3, 2).unwrap().powf(2.0).sum(), 1e-5);
    }

    #[test]
    fn grad_nonlinearities_and_guards() {
        let x = t(1, 4, &[0.6, 1.7, 0.9, 2.3]);
        fd_check(&x, || x.log().sum(), 1e-5);
        fd_check(&x, || x.powf(-0.5).sum(), 1e-5);
        fd_check(&x, || x.clamp(0.7, 2.0).sum(), 1e-4);
        fd_check(&x, || x.relu().sum(), 1e-5);
        let a = t(1, 3, &[0.2, 0.9, -0.4]);
        let b = t(1, 3, &[0.5, 0.1, -0.8]);
        fd_check(&a, || a.maximum(&b).unwrap().sum(), 1e-5);
    }

    #[test]
    fn maximum_tie_splits_gradient() {
        let a = t(1, 2, &[0.5, 1.0]);
        let m = a.maximum(&a).unwrap();
        m.sum().backward().unwrap();
        // both branches reference the same tensor, halves recombine to 1
        assert_eq!(a.grad(), vec![1.0, 1.0]);
    }

    #[test]
    fn registry_iterates_sorted_and_clones_detached() {
        let mut reg = ParamRegistry::new();
        reg.insert("w2", Tensor::ones(1, 1));
        reg.insert("a1", Tensor::zeros(1, 1));
        reg.insert("m3", Tensor::scalar(4.0));
        let names: Vec<&String> = reg.names().collect();
        assert_eq!(names, ["a1", "m3", "w2"]);
        let snap = reg.clone_detached();
        snap.expect("m3").set_data(&[9.0]);
        assert_eq!(reg.expect("m3").item(), 4.0);
    }
}
