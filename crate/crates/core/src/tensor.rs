//! Dense row-major `f64` tensors with reverse-mode differentiation.
//!
//! Every operation returns a fresh [`Tensor`]; when any input requires a
//! gradient the result records the operation and its inputs so that
//! [`Tensor::backward`] can replay the chain rule. Only the gradient buffers
//! are mutable after construction.
//!
//! Broadcasting is limited to the leading (row) dimension: [`Tensor::add_bias`]
//! adds one row to every row, [`Tensor::scale_rows`] scales each row by its own
//! scalar. Anything else needs an explicit gather or reshape.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Result, TkgError};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Op>,
}

enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    AddBias(Tensor, Tensor),
    ScaleRows(Tensor, Tensor),
    LeakyRelu(Tensor, f64),
    Sigmoid(Tensor),
    Tanh(Tensor),
    Softplus(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Sum(Tensor),
    MeanRows(Tensor),
    Reshape(Tensor),
    GatherRows(Tensor, Vec<usize>),
    ScatterAddRows(Tensor, Vec<usize>),
    OverwriteRows(Tensor, Tensor, Vec<usize>),
    SelectRows(Tensor, Tensor, Vec<bool>),
    ConcatCols(Vec<Tensor>),
    ConcatRows(Vec<Tensor>),
    SliceCols(Tensor, usize),
    RowDot(Tensor, Tensor),
    SegmentSoftmax(Tensor, Vec<usize>),
    LogSoftmaxRows(Tensor),
    LogSumExpRows(Tensor),
    Pick(Tensor, Vec<usize>),
    GatherElems(Tensor, Vec<usize>),
    MaxRows(Tensor, Vec<usize>),
    GroupedLinear {
        input: Tensor,
        weights: Vec<Tensor>,
        groups: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Div(a, b)
            | MatMul(a, b)
            | AddBias(a, b)
            | ScaleRows(a, b)
            | RowDot(a, b)
            | OverwriteRows(a, b, _)
            | SelectRows(a, b, _) => {
                vec![a, b]
            }
            Scale(a, _)
            | AddScalar(a)
            | Transpose(a)
            | LeakyRelu(a, _)
            | Sigmoid(a)
            | Tanh(a)
            | Softplus(a)
            | Exp(a)
            | Log(a)
            | Sum(a)
            | MeanRows(a)
            | Reshape(a)
            | GatherRows(a, _)
            | ScatterAddRows(a, _)
            | SliceCols(a, _)
            | SegmentSoftmax(a, _)
            | LogSoftmaxRows(a)
            | LogSumExpRows(a)
            | Pick(a, _)
            | GatherElems(a, _)
            | MaxRows(a, _) => vec![a],
            ConcatCols(ts) | ConcatRows(ts) => ts.iter().collect(),
            GroupedLinear { input, weights, .. } => {
                let mut v = vec![input];
                v.extend(weights.iter());
                v
            }
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0) || data.is_empty(),
            "tensor dims must be positive, got {shape:?}"
        );
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            op,
        }))
    }

    /// Result of an operation; the op is only kept if some input needs a gradient.
    fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Self {
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        if requires_grad {
            Tensor::build(data, shape, true, Some(op))
        } else {
            Tensor::build(data, shape, false, None)
        }
    }

    /// A constant (no gradient) tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        Tensor::build(data, shape.to_vec(), false, None)
    }

    /// A trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Self {
        Tensor::build(data, shape.to_vec(), true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(vec![0.0; numel(shape)], shape)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![value], &[1])
    }

    /// A `1 x n` row.
    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(data, &[1, n])
    }

    /// An `n x 1` column.
    pub fn column(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(data, &[n, 1])
    }

    pub fn id(&self) -> usize {
        self.0.id
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

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(
            self.0.shape.len(),
            2,
            "expected a matrix, got shape {:?}",
            self.0.shape
        );
        (self.0.shape[0], self.0.shape[1])
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.0.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.0.shape
        );
        self.0.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    /// Resets the gradient to an all-zero buffer.
    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = Some(vec![0.0; self.numel()]);
    }

    /// Drops the gradient buffer entirely.
    pub fn clear_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.0.data.clone(), &self.0.shape)
    }

    /// A fresh trainable leaf with this tensor's values.
    pub fn to_param(&self) -> Tensor {
        Tensor::param(self.0.data.clone(), &self.0.shape)
    }

    // ----- elementwise -----

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        assert_eq!(
            self.shape(),
            other.shape(),
            "elementwise op on mismatched shapes"
        );
        self.data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data().iter().map(|&x| f(x)).collect()
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let d = self.zip(other, |a, b| a + b);
        Tensor::from_op(
            d,
            self.shape().to_vec(),
            Op::Add(self.clone(), other.clone()),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let d = self.zip(other, |a, b| a - b);
        Tensor::from_op(
            d,
            self.shape().to_vec(),
            Op::Sub(self.clone(), other.clone()),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let d = self.zip(other, |a, b| a * b);
        Tensor::from_op(
            d,
            self.shape().to_vec(),
            Op::Mul(self.clone(), other.clone()),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let d = self.zip(other, |a, b| a / b);
        Tensor::from_op(
            d,
            self.shape().to_vec(),
            Op::Div(self.clone(), other.clone()),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let d = self.map(|x| x * c);
        Tensor::from_op(d, self.shape().to_vec(), Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let d = self.map(|x| x + c);
        Tensor::from_op(d, self.shape().to_vec(), Op::AddScalar(self.clone()))
    }

    /// Elementwise `x` for `x >= 0`, `slope * x` otherwise.
    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        assert!(
            slope > 0.0 && slope < 1.0,
            "leaky-relu slope must lie in (0,1)"
        );
        let d = self.map(|x| if x >= 0.0 { x } else { slope * x });
        Tensor::from_op(d, self.shape().to_vec(), Op::LeakyRelu(self.clone(), slope))
    }

    pub fn sigmoid(&self) -> Tensor {
        let d = self.map(sigmoid);
        Tensor::from_op(d, self.shape().to_vec(), Op::Sigmoid(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        let d = self.map(f64::tanh);
        Tensor::from_op(d, self.shape().to_vec(), Op::Tanh(self.clone()))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor {
        let d = self.map(softplus);
        Tensor::from_op(d, self.shape().to_vec(), Op::Softplus(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        let d = self.map(f64::exp);
        Tensor::from_op(d, self.shape().to_vec(), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        let d = self.map(f64::ln);
        Tensor::from_op(d, self.shape().to_vec(), Op::Log(self.clone()))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    // ----- reductions and reshapes -----

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![1], Op::Sum(self.clone()))
    }

    /// Column means of an `n x d` matrix, as `1 x d`.
    pub fn mean_rows(&self) -> Tensor {
        let (n, d) = self.dims2();
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Tensor::from_op(out, vec![1, d], Op::MeanRows(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "reshape must keep the element count"
        );
        Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            Op::Reshape(self.clone()),
        )
    }

    pub fn transpose(&self) -> Tensor {
        let (n, m) = self.dims2();
        let src = self.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        Tensor::from_op(out, vec![m, n], Op::Transpose(self.clone()))
    }

    // ----- linear algebra -----

    /// Matrix product `(m x k) . (k x n)`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        assert_eq!(k, k2, "matmul inner dims differ: {k} vs {k2}");
        let out = matmul_raw(self.data(), other.data(), m, k, n);
        Tensor::from_op(out, vec![m, n], Op::MatMul(self.clone(), other.clone()))
    }

    /// Adds a `1 x d` (or length-`d`) bias to every row of an `n x d` matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let (n, d) = self.dims2();
        assert_eq!(bias.numel(), d, "bias width mismatch");
        let b = bias.data();
        let mut out = self.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += b[j];
            }
        }
        Tensor::from_op(out, vec![n, d], Op::AddBias(self.clone(), bias.clone()))
    }

    /// Multiplies row `i` of an `n x d` matrix by `w[i]` (`w` is `n x 1`).
    pub fn scale_rows(&self, w: &Tensor) -> Tensor {
        let (n, d) = self.dims2();
        assert_eq!(w.numel(), n, "row weights must have one entry per row");
        let mut out = self.data().to_vec();
        for i in 0..n {
            let wi = w.data()[i];
            out[i * d..(i + 1) * d].iter_mut().for_each(|x| *x *= wi);
        }
        Tensor::from_op(out, vec![n, d], Op::ScaleRows(self.clone(), w.clone()))
    }

    /// Row-wise inner products of two `n x d` matrices, as `n x 1`.
    pub fn row_dot(&self, other: &Tensor) -> Tensor {
        let (n, d) = self.dims2();
        assert_eq!(self.shape(), other.shape(), "row_dot shape mismatch");
        let out = (0..n)
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += self.data()[i * d + j] * other.data()[i * d + j];
                }
                acc
            })
            .collect();
        Tensor::from_op(out, vec![n, 1], Op::RowDot(self.clone(), other.clone()))
    }

    /// Row `i` of the result is `weights[groups[i]] . self[i]`.
    ///
    /// Each weight is `out x in`, `self` is `n x in`. This is how per-type and
    /// per-relation projections are applied to a batch in one node.
    pub fn grouped_linear(&self, weights: &[Tensor], groups: &[usize]) -> Tensor {
        let (n, din) = self.dims2();
        assert_eq!(groups.len(), n, "one group id per row required");
        assert!(
            !weights.is_empty(),
            "grouped_linear needs at least one weight"
        );
        let dout = weights[0].rows();
        for w in weights {
            assert_eq!(
                w.dims2(),
                (dout, din),
                "grouped_linear weight shape mismatch"
            );
        }
        let x = self.data();
        let mut out = vec![0.0; n * dout];
        for (i, &g) in groups.iter().enumerate() {
            let w = weights[g].data();
            let xi = &x[i * din..(i + 1) * din];
            for a in 0..dout {
                let wa = &w[a * din..(a + 1) * din];
                let mut acc = 0.0;
                for j in 0..din {
                    acc += wa[j] * xi[j];
                }
                out[i * dout + a] = acc;
            }
        }
        Tensor::from_op(
            out,
            vec![n, dout],
            Op::GroupedLinear {
                input: self.clone(),
                weights: weights.to_vec(),
                groups: groups.to_vec(),
            },
        )
    }

    // ----- indexing -----

    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let (n, d) = self.dims2();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < n, "row index {i} out of bounds ({n})");
            out.extend_from_slice(self.row(i));
        }
        if idx.is_empty() {
            return Tensor::new(Vec::new(), &[0, d]);
        }
        Tensor::from_op(
            out,
            vec![idx.len(), d],
            Op::GatherRows(self.clone(), idx.to_vec()),
        )
    }

    /// Sums row `k` of `self` into row `idx[k]` of an `n`-row zero matrix.
    pub fn scatter_add_rows(&self, idx: &[usize], n: usize) -> Tensor {
        let (k, d) = self.dims2();
        assert_eq!(idx.len(), k, "one target row per source row required");
        let mut out = vec![0.0; n * d];
        for (src, &dst) in idx.iter().enumerate() {
            assert!(dst < n, "target row {dst} out of bounds ({n})");
            for j in 0..d {
                out[dst * d + j] += self.data()[src * d + j];
            }
        }
        Tensor::from_op(
            out,
            vec![n, d],
            Op::ScatterAddRows(self.clone(), idx.to_vec()),
        )
    }

    /// Copy of `self` with row `idx[k]` replaced by row `k` of `rows`. Indices must be distinct.
    pub fn overwrite_rows(&self, idx: &[usize], rows: &Tensor) -> Tensor {
        let (n, d) = self.dims2();
        let (k, d2) = rows.dims2();
        assert_eq!(d, d2, "overwrite_rows width mismatch");
        assert_eq!(idx.len(), k, "one index per replacement row required");
        let mut seen = HashSet::with_capacity(k);
        let mut out = self.data().to_vec();
        for (src, &dst) in idx.iter().enumerate() {
            assert!(
                dst < n && seen.insert(dst),
                "overwrite_rows indices must be distinct and in bounds"
            );
            out[dst * d..(dst + 1) * d].copy_from_slice(rows.row(src));
        }
        Tensor::from_op(
            out,
            vec![n, d],
            Op::OverwriteRows(self.clone(), rows.clone(), idx.to_vec()),
        )
    }

    /// Row `i` taken from `self` when `mask[i]`, otherwise from `other`.
    pub fn select_rows(&self, other: &Tensor, mask: &[bool]) -> Tensor {
        let (n, d) = self.dims2();
        assert_eq!(self.shape(), other.shape(), "select_rows shape mismatch");
        assert_eq!(mask.len(), n, "select_rows mask length mismatch");
        let mut out = Vec::with_capacity(n * d);
        for (i, &m) in mask.iter().enumerate() {
            out.extend_from_slice(if m { self.row(i) } else { other.row(i) });
        }
        Tensor::from_op(
            out,
            vec![n, d],
            Op::SelectRows(self.clone(), other.clone(), mask.to_vec()),
        )
    }

    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let n = parts[0].rows();
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        assert!(
            parts.iter().all(|p| p.rows() == n),
            "concat_cols row mismatch"
        );
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Tensor::from_op(out, vec![n, total], Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let d = parts[0].cols();
        assert!(
            parts.iter().all(|p| p.cols() == d),
            "concat_rows width mismatch"
        );
        let n: usize = parts.iter().map(|p| p.rows()).sum();
        let mut out = Vec::with_capacity(n * d);
        for p in parts {
            out.extend_from_slice(p.data());
        }
        Tensor::from_op(out, vec![n, d], Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let (n, d) = self.dims2();
        assert!(
            start < end && end <= d,
            "slice_cols range {start}..{end} invalid for width {d}"
        );
        let mut out = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            out.extend_from_slice(&self.row(i)[start..end]);
        }
        Tensor::from_op(
            out,
            vec![n, end - start],
            Op::SliceCols(self.clone(), start),
        )
    }

    /// Element `x[i, idx[i]]` of each row, as `n x 1`.
    pub fn pick(&self, idx: &[usize]) -> Tensor {
        let (n, c) = self.dims2();
        assert_eq!(idx.len(), n, "pick needs one index per row");
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "pick index {j} out of bounds ({c})");
                self.data()[i * c + j]
            })
            .collect();
        Tensor::from_op(out, vec![n, 1], Op::Pick(self.clone(), idx.to_vec()))
    }

    /// Flat-index gather, as `k x 1`.
    pub fn gather_elems(&self, idx: &[usize]) -> Tensor {
        let out = idx.iter().map(|&i| self.data()[i]).collect();
        Tensor::from_op(
            out,
            vec![idx.len(), 1],
            Op::GatherElems(self.clone(), idx.to_vec()),
        )
    }

    /// Column-wise maximum over the listed rows, as `1 x d`.
    pub fn max_rows(&self, rows: &[usize]) -> Tensor {
        let (_, d) = self.dims2();
        assert!(!rows.is_empty(), "max_rows over an empty row set");
        let mut arg = vec![rows[0]; d];
        let mut out = self.row(rows[0]).to_vec();
        for &i in &rows[1..] {
            for j in 0..d {
                let v = self.data()[i * d + j];
                if v > out[j] {
                    out[j] = v;
                    arg[j] = i;
                }
            }
        }
        Tensor::from_op(out, vec![1, d], Op::MaxRows(self.clone(), arg))
    }

    // ----- normalisers -----

    /// Softmax within each segment; `segments[k]` names the segment of entry `k`.
    pub fn segment_softmax(&self, segments: &[usize], num_segments: usize) -> Tensor {
        assert_eq!(
            segments.len(),
            self.numel(),
            "one segment id per entry required"
        );
        let x = self.data();
        let mut max = vec![f64::NEG_INFINITY; num_segments];
        for (k, &s) in segments.iter().enumerate() {
            max[s] = max[s].max(x[k]);
        }
        let mut out: Vec<f64> = segments
            .iter()
            .enumerate()
            .map(|(k, &s)| (x[k] - max[s]).exp())
            .collect();
        let mut total = vec![0.0; num_segments];
        for (k, &s) in segments.iter().enumerate() {
            total[s] += out[k];
        }
        for (k, &s) in segments.iter().enumerate() {
            out[k] /= total[s];
        }
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::SegmentSoftmax(self.clone(), segments.to_vec()),
        )
    }

    pub fn log_softmax_rows(&self) -> Tensor {
        let (n, c) = self.dims2();
        let mut out = self.data().to_vec();
        for i in 0..n {
            let row = &mut out[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Tensor::from_op(out, vec![n, c], Op::LogSoftmaxRows(self.clone()))
    }

    /// Row-wise `log sum exp`, as `n x 1`.
    pub fn log_sum_exp_rows(&self) -> Tensor {
        let (n, _) = self.dims2();
        let out = (0..n).map(|i| log_sum_exp(self.row(i))).collect();
        Tensor::from_op(out, vec![n, 1], Op::LogSumExpRows(self.clone()))
    }

    // ----- differentiation -----

    /// Accumulates `d self / d leaf` into every reachable trainable leaf.
    ///
    /// Panics unless `self` holds exactly one element. Calling it twice without
    /// resetting the leaves adds the gradients.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward() needs a scalar loss, got shape {:?}",
            self.shape()
        );
        if !self.requires_grad() {
            return;
        }
        let order = self.topological_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => propagate(op, node, &g, &mut grads),
            }
        }
    }

    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in op.inputs() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn accumulate(grads: &mut HashMap<usize, Vec<f64>>, t: &Tensor, g: Vec<f64>) {
    if !t.requires_grad() {
        return;
    }
    match grads.get_mut(&t.id()) {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
        None => {
            grads.insert(t.id(), g);
        }
    }
}

fn propagate(op: &Op, out: &Tensor, g: &[f64], grads: &mut HashMap<usize, Vec<f64>>) {
    use Op::*;
    let y = out.data();
    match op {
        Add(a, b) => {
            accumulate(grads, a, g.to_vec());
            accumulate(grads, b, g.to_vec());
        }
        Sub(a, b) => {
            accumulate(grads, a, g.to_vec());
            accumulate(grads, b, g.iter().map(|v| -v).collect());
        }
        Mul(a, b) => {
            if a.requires_grad() {
                accumulate(
                    grads,
                    a,
                    g.iter().zip(b.data()).map(|(g, b)| g * b).collect(),
                );
            }
            if b.requires_grad() {
                accumulate(
                    grads,
                    b,
                    g.iter().zip(a.data()).map(|(g, a)| g * a).collect(),
                );
            }
        }
        Div(a, b) => {
            if a.requires_grad() {
                accumulate(
                    grads,
                    a,
                    g.iter().zip(b.data()).map(|(g, b)| g / b).collect(),
                );
            }
            if b.requires_grad() {
                let gb = g
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect();
                accumulate(grads, b, gb);
            }
        }
        Scale(a, c) => accumulate(grads, a, g.iter().map(|v| v * c).collect()),
        AddScalar(a) | Reshape(a) => accumulate(grads, a, g.to_vec()),
        MatMul(a, b) => {
            let (m, k) = a.dims2();
            let n = b.cols();
            if a.requires_grad() {
                // dA = dC . B^T
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * b.data()[p * n + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                accumulate(grads, a, ga);
            }
            if b.requires_grad() {
                // dB = A^T . dC
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = a.data()[i * k + p];
                        for j in 0..n {
                            gb[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                accumulate(grads, b, gb);
            }
        }
        Transpose(a) => {
            let (n, m) = a.dims2();
            let mut ga = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    ga[i * m + j] = g[j * n + i];
                }
            }
            accumulate(grads, a, ga);
        }
        AddBias(x, b) => {
            accumulate(grads, x, g.to_vec());
            if b.requires_grad() {
                let d = b.numel();
                let mut gb = vec![0.0; d];
                for (k, v) in g.iter().enumerate() {
                    gb[k % d] += v;
                }
                accumulate(grads, b, gb);
            }
        }
        ScaleRows(x, w) => {
            let (n, d) = x.dims2();
            if x.requires_grad() {
                let mut gx = g.to_vec();
                for i in 0..n {
                    let wi = w.data()[i];
                    gx[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= wi);
                }
                accumulate(grads, x, gx);
            }
            if w.requires_grad() {
                let gw = (0..n)
                    .map(|i| {
                        let mut acc = 0.0;
                        for j in 0..d {
                            acc += g[i * d + j] * x.data()[i * d + j];
                        }
                        acc
                    })
                    .collect();
                accumulate(grads, w, gw);
            }
        }
        LeakyRelu(x, slope) => {
            let gx = g
                .iter()
                .zip(x.data())
                .map(|(g, &x)| if x >= 0.0 { *g } else { g * slope })
                .collect();
            accumulate(grads, x, gx);
        }
        Sigmoid(x) => accumulate(
            grads,
            x,
            g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
        ),
        Tanh(x) => accumulate(
            grads,
            x,
            g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
        ),
        Softplus(x) => accumulate(
            grads,
            x,
            g.iter()
                .zip(x.data())
                .map(|(g, &x)| g * sigmoid(x))
                .collect(),
        ),
        Exp(x) => accumulate(grads, x, g.iter().zip(y).map(|(g, y)| g * y).collect()),
        Log(x) => accumulate(
            grads,
            x,
            g.iter().zip(x.data()).map(|(g, x)| g / x).collect(),
        ),
        Sum(x) => accumulate(grads, x, vec![g[0]; x.numel()]),
        MeanRows(x) => {
            let (n, d) = x.dims2();
            let inv = 1.0 / n as f64;
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    gx[i * d + j] = g[j] * inv;
                }
            }
            accumulate(grads, x, gx);
        }
        GatherRows(x, idx) => {
            let d = x.cols();
            let mut gx = vec![0.0; x.numel()];
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..d {
                    gx[i * d + j] += g[k * d + j];
                }
            }
            accumulate(grads, x, gx);
        }
        ScatterAddRows(x, idx) => {
            let d = x.cols();
            let mut gx = vec![0.0; x.numel()];
            for (k, &i) in idx.iter().enumerate() {
                gx[k * d..(k + 1) * d].copy_from_slice(&g[i * d..(i + 1) * d]);
            }
            accumulate(grads, x, gx);
        }
        OverwriteRows(base, rows, idx) => {
            let d = base.cols();
            if base.requires_grad() {
                let mut gb = g.to_vec();
                for &i in idx {
                    gb[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                }
                accumulate(grads, base, gb);
            }
            if rows.requires_grad() {
                let mut gr = vec![0.0; rows.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    gr[k * d..(k + 1) * d].copy_from_slice(&g[i * d..(i + 1) * d]);
                }
                accumulate(grads, rows, gr);
            }
        }
        SelectRows(a, b, mask) => {
            let d = a.cols();
            let mut ga = vec![0.0; a.numel()];
            let mut gb = vec![0.0; b.numel()];
            for (i, &m) in mask.iter().enumerate() {
                let dst = if m { &mut ga } else { &mut gb };
                dst[i * d..(i + 1) * d].copy_from_slice(&g[i * d..(i + 1) * d]);
            }
            accumulate(grads, a, ga);
            accumulate(grads, b, gb);
        }
        ConcatCols(parts) => {
            let n = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for p in parts {
                let w = p.cols();
                if p.requires_grad() {
                    let mut gp = Vec::with_capacity(n * w);
                    for i in 0..n {
                        gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(grads, p, gp);
                }
                offset += w;
            }
        }
        ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = p.numel();
                accumulate(grads, p, g[offset..offset + len].to_vec());
                offset += len;
            }
        }
        SliceCols(x, start) => {
            let (n, d) = x.dims2();
            let w = out.cols();
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                gx[i * d + start..i * d + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            accumulate(grads, x, gx);
        }
        RowDot(a, b) => {
            let (n, d) = a.dims2();
            if a.requires_grad() {
                let mut ga = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        ga[i * d + j] = g[i] * b.data()[i * d + j];
                    }
                }
                accumulate(grads, a, ga);
            }
            if b.requires_grad() {
                let mut gb = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        gb[i * d + j] = g[i] * a.data()[i * d + j];
                    }
                }
                accumulate(grads, b, gb);
            }
        }
        SegmentSoftmax(x, segments) => {
            let nseg = segments.iter().copied().max().map_or(0, |m| m + 1);
            let mut dot = vec![0.0; nseg];
            for (k, &s) in segments.iter().enumerate() {
                dot[s] += g[k] * y[k];
            }
            let gx = segments
                .iter()
                .enumerate()
                .map(|(k, &s)| y[k] * (g[k] - dot[s]))
                .collect();
            accumulate(grads, x, gx);
        }
        LogSoftmaxRows(x) => {
            let (n, c) = x.dims2();
            let mut gx = vec![0.0; n * c];
            for i in 0..n {
                let gs: f64 = g[i * c..(i + 1) * c].iter().sum();
                for j in 0..c {
                    gx[i * c + j] = g[i * c + j] - y[i * c + j].exp() * gs;
                }
            }
            accumulate(grads, x, gx);
        }
        LogSumExpRows(x) => {
            let (n, c) = x.dims2();
            let mut gx = vec![0.0; n * c];
            for i in 0..n {
                for j in 0..c {
                    gx[i * c + j] = g[i] * (x.data()[i * c + j] - y[i]).exp();
                }
            }
            accumulate(grads, x, gx);
        }
        Pick(x, idx) => {
            let c = x.cols();
            let mut gx = vec![0.0; x.numel()];
            for (i, &j) in idx.iter().enumerate() {
                gx[i * c + j] += g[i];
            }
            accumulate(grads, x, gx);
        }
        GatherElems(x, idx) => {
            let mut gx = vec![0.0; x.numel()];
            for (k, &i) in idx.iter().enumerate() {
                gx[i] += g[k];
            }
            accumulate(grads, x, gx);
        }
        MaxRows(x, arg) => {
            let d = x.cols();
            let mut gx = vec![0.0; x.numel()];
            for (j, &i) in arg.iter().enumerate() {
                gx[i * d + j] += g[j];
            }
            accumulate(grads, x, gx);
        }
        GroupedLinear {
            input,
            weights,
            groups,
        } => {
            let (n, din) = input.dims2();
            let dout = out.cols();
            let x = input.data();
            if input.requires_grad() {
                let mut gx = vec![0.0; n * din];
                for (i, &grp) in groups.iter().enumerate() {
                    let w = weights[grp].data();
                    for a in 0..dout {
                        let ga = g[i * dout + a];
                        for j in 0..din {
                            gx[i * din + j] += w[a * din + j] * ga;
                        }
                    }
                }
                accumulate(grads, input, gx);
            }
            let mut gw: HashMap<usize, Vec<f64>> = HashMap::new();
            for (i, &grp) in groups.iter().enumerate() {
                if !weights[grp].requires_grad() {
                    continue;
                }
                let buf = gw.entry(grp).or_insert_with(|| vec![0.0; dout * din]);
                for a in 0..dout {
                    let ga = g[i * dout + a];
                    for j in 0..din {
                        buf[a * din + j] += ga * x[i * din + j];
                    }
                }
            }
            let mut used: Vec<usize> = gw.keys().copied().collect();
            used.sort_unstable();
            for grp in used {
                let buf = gw.remove(&grp).expect("present");
                accumulate(grads, &weights[grp], buf);
            }
        }
    }
}

/// Naive `i-k-j` product; per output entry the terms are summed in `k` order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax of a plain vector, shifted by its maximum.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(TkgError::InvalidArgument(
            "softmax of an empty vector".into(),
        ));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(TkgError::InvalidArgument(format!(
            "softmax input contains non-finite value {bad}"
        )));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Scalar leaky-ReLU.
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}
