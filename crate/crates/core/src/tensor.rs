//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records primitive applications in evaluation order; handles
//! ([`Var`]) index into it. [`Tape::backward`] walks the tape once in reverse
//! and returns gradients for every node that depends on a trainable leaf.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix. Vectors are `1 x n` or `n x 1`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn col_vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Glorot-normal initialization.
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let sd = (2.0 / (rows + cols) as f64).sqrt();
        let normal = Normal::new(0.0, sd).expect("positive sd");
        Tensor {
            rows,
            cols,
            data: (0..rows * cols).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn add_assign(&mut self, o: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &Tensor,
    ta: bool,
    b: &Tensor,
    tb: bool,
    c: &mut [f64],
    beta: f64,
) -> (usize, usize) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    let (rsa, csa) = if ta { (1, a.cols) } else { (a.cols, 1) };
    let (rsb, csb) = if tb { (1, b.cols) } else { (b.cols, 1) };
    if m == 0 || n == 0 {
        return (m, n);
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return (m, n);
    }
    // SAFETY: the pointers cover `m*k`, `k*n` and `m*n` elements with the
    // given strides, all derived from the tensors' own dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    (m, n)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(a.rows, b.cols);
    gemm(a, false, b, false, &mut out.data, 0.0);
    Ok(out)
}

/// A primitive defined outside this module. `forward` may keep whatever it
/// needs for `backward`; the tape owns the op afterwards.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradients for each input given the output gradient; entries for
    /// inputs with `wants[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        wants: &[bool],
    ) -> Vec<Option<Tensor>>;
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumRows(Var),
    SumRowsCanonical(Var),
    SumCols(Var),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    SegmentSumSorted(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    BceWithLogits(Var, Vec<f64>, f64),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Arc<Tensor>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(Arc::new(t), true)
    }

    /// Constant leaf: no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Arc::new(t), false)
    }

    /// Constant leaf sharing storage with the caller.
    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.leaf(t, false)
    }

    /// Trainable leaf sharing storage with the caller.
    pub fn param_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.leaf(t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_shared(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, x, y));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows != 1 || r.cols != x.cols {
            return Err(shape_err("add_row", x, r));
        }
        let mut value = x.clone();
        for chunk in value.data.chunks_mut(r.cols.max(1)) {
            for (v, b) in chunk.iter_mut().zip(&r.data) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let value = Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect(),
        };
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let value = Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect(),
        };
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Scales each row of an `r x c` matrix by the matching entry of an `r x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (x, s) = (self.value(a), self.value(col));
        if s.cols != 1 || s.rows != x.rows {
            return Err(shape_err("mul_col", x, s));
        }
        let mut value = x.clone();
        if x.cols > 0 {
            for (chunk, w) in value.data.chunks_mut(x.cols).zip(&s.data) {
                for v in chunk {
                    *v *= w;
                }
            }
        }
        Ok(self.push(value, Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows);
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows != rows) {
            return Err(shape_err("concat_cols", self.value(parts[0]), self.value(bad)));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor { rows, cols, data };
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols);
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).cols != cols) {
            return Err(shape_err("concat_rows", self.value(parts[0]), self.value(bad)));
        }
        let rows = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let value = Tensor { rows, cols, data };
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.cols {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: x.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(x.rows * w);
        for r in 0..x.rows {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let value = Tensor {
            rows: x.rows,
            cols: w,
            data,
        };
        Ok(self.push(value, Op::SliceCols(a, start), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Sum of all entries as `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums as `1 x c`, accumulated in row order.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = vec![0.0; x.cols];
        for r in 0..x.rows {
            for (o, v) in out.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let value = Tensor::row_vector(out);
        self.push(value, Op::SumRows(a), &[a])
    }

    /// Column sums as `1 x c`, each accumulated over the column's values in
    /// sorted order so the result does not depend on row order.
    pub fn sum_rows_canonical(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = vec![0.0; x.cols];
        let mut col = Vec::with_capacity(x.rows);
        for (c, o) in out.iter_mut().enumerate() {
            col.clear();
            col.extend((0..x.rows).map(|r| x.get(r, c)));
            col.sort_by(f64::total_cmp);
            *o = col.iter().sum();
        }
        let value = Tensor::row_vector(out);
        self.push(value, Op::SumRowsCanonical(a), &[a])
    }

    /// Row sums as `r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = (0..x.rows).map(|r| x.row(r).iter().sum()).collect();
        let value = Tensor::col_vector(out);
        self.push(value, Op::SumCols(a), &[a])
    }

    /// Rows of `a` selected by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows) {
            return Err(Error::DimensionMismatch {
                expected: x.rows,
                got: bad,
            });
        }
        let mut data = Vec::with_capacity(idx.len() * x.cols);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let value = Tensor {
            rows: idx.len(),
            cols: x.cols,
            data,
        };
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    fn check_segments(&self, op: &'static str, a: Var, seg: &[usize], n: usize) -> Result<()> {
        let x = self.value(a);
        if seg.len() != x.rows {
            return Err(Error::ShapeMismatch {
                op,
                lhs: x.shape().to_vec(),
                rhs: vec![seg.len()],
            });
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: bad,
            });
        }
        Ok(())
    }

    /// Row `i` of `a` is added into output row `seg[i]`; `n` output rows.
    pub fn segment_sum(&mut self, a: Var, seg: &[usize], n: usize) -> Result<Var> {
        self.check_segments("segment_sum", a, seg, n)?;
        let x = self.value(a);
        let mut value = Tensor::zeros(n, x.cols);
        for (i, &s) in seg.iter().enumerate() {
            let dst = &mut value.data[s * x.cols..(s + 1) * x.cols];
            for (d, v) in dst.iter_mut().zip(x.row(i)) {
                *d += v;
            }
        }
        Ok(self.push(value, Op::SegmentSum(a, seg.to_vec()), &[a]))
    }

    /// Like [`Tape::segment_sum`], but each output entry sums its
    /// contributions in sorted order, so the result does not depend on the
    /// order of rows within a segment.
    pub fn segment_sum_sorted(&mut self, a: Var, seg: &[usize], n: usize) -> Result<Var> {
        self.check_segments("segment_sum_sorted", a, seg, n)?;
        let x = self.value(a);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, &s) in seg.iter().enumerate() {
            members[s].push(i);
        }
        let mut value = Tensor::zeros(n, x.cols);
        let mut buf = Vec::new();
        for (s, rows) in members.iter().enumerate() {
            for c in 0..x.cols {
                buf.clear();
                buf.extend(rows.iter().map(|&r| x.get(r, c)));
                buf.sort_by(f64::total_cmp);
                value.data[s * x.cols + c] = buf.iter().sum();
            }
        }
        Ok(self.push(value, Op::SegmentSumSorted(a, seg.to_vec()), &[a]))
    }

    /// Softmax of an `r x 1` score column within each segment.
    pub fn segment_softmax(&mut self, a: Var, seg: &[usize], n: usize) -> Result<Var> {
        self.check_segments("segment_softmax", a, seg, n)?;
        let x = self.value(a);
        if x.cols != 1 {
            return Err(Error::ShapeMismatch {
                op: "segment_softmax",
                lhs: x.shape().to_vec(),
                rhs: vec![x.rows, 1],
            });
        }
        let mut max = vec![f64::NEG_INFINITY; n];
        for (&v, &s) in x.data.iter().zip(seg) {
            max[s] = max[s].max(v);
        }
        let e: Vec<f64> = x.data.iter().zip(seg).map(|(&v, &s)| (v - max[s]).exp()).collect();
        let mut z = vec![0.0; n];
        for (&v, &s) in e.iter().zip(seg) {
            z[s] += v;
        }
        let out = e.iter().zip(seg).map(|(&v, &s)| v / z[s]).collect();
        let value = Tensor::col_vector(out);
        Ok(self.push(value, Op::SegmentSoftmax(a, seg.to_vec()), &[a]))
    }

    /// Columnwise maximum within each segment; empty segments give zero rows.
    pub fn segment_max(&mut self, a: Var, seg: &[usize], n: usize) -> Result<Var> {
        self.check_segments("segment_max", a, seg, n)?;
        let x = self.value(a);
        let mut value = Tensor::full(n, x.cols, f64::NEG_INFINITY);
        for (i, &s) in seg.iter().enumerate() {
            let dst = &mut value.data[s * x.cols..(s + 1) * x.cols];
            for (d, &v) in dst.iter_mut().zip(x.row(i)) {
                if v > *d {
                    *d = v;
                }
            }
        }
        for v in value.data.iter_mut() {
            if *v == f64::NEG_INFINITY {
                *v = 0.0;
            }
        }
        Ok(self.push(value, Op::SegmentMax(a, seg.to_vec()), &[a]))
    }

    pub fn custom(&mut self, mut op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let value = {
            let xs: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
            op.forward(&xs)?
        };
        Ok(self.push(value, Op::Custom(op, inputs.to_vec()), inputs))
    }

    /// Mean weighted binary cross-entropy of logits `z` (`r x 1`) against labels.
    pub fn bce_with_logits(&mut self, z: Var, labels: &[f64], pos_weight: f64) -> Result<Var> {
        let x = self.value(z);
        if x.cols != 1 || x.rows != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: x.shape().to_vec(),
                rhs: vec![labels.len(), 1],
            });
        }
        let n = labels.len().max(1) as f64;
        let total: f64 = x
            .data
            .iter()
            .zip(labels)
            .map(|(&z, &y)| {
                // log(sigmoid(z)) = -softplus(-z), log(1 - sigmoid(z)) = -softplus(z)
                pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z)
            })
            .sum();
        let value = Tensor::scalar(total / n);
        Ok(self.push(value, Op::BceWithLogits(z, labels.to_vec(), pos_weight), &[z]))
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        let seed = self.value(out).map(|_| 1.0);
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        fn ew(x: &Tensor, y: &Tensor, g: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
            Tensor {
                rows: x.rows,
                cols: x.cols,
                data: x
                    .data
                    .iter()
                    .zip(&y.data)
                    .zip(&g.data)
                    .map(|((&x, &y), &g)| f(x, y, g))
                    .collect(),
            }
        }
        let y = &*node.value;
        macro_rules! elementwise {
            ($a:expr, $f:expr) => {
                ew(val($a), y, g, $f)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    let mut da = Tensor::zeros(val(*a).rows, val(*a).cols);
                    gemm(g, false, val(*b), true, &mut da.data, 0.0);
                    acc(*a, da, grads);
                }
                if wants(*b) {
                    let mut db = Tensor::zeros(val(*b).rows, val(*b).cols);
                    gemm(val(*a), true, g, false, &mut db.data, 0.0);
                    acc(*b, db, grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone(), grads);
                if wants(*r) {
                    let mut dr = vec![0.0; g.cols];
                    for row in 0..g.rows {
                        for (d, v) in dr.iter_mut().zip(g.row(row)) {
                            *d += v;
                        }
                    }
                    acc(*r, Tensor::row_vector(dr), grads);
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let t = elementwise!(*b, |y, _, g| y * g);
                    acc(*a, t, grads);
                }
                if wants(*b) {
                    let t = elementwise!(*a, |x, _, g| x * g);
                    acc(*b, t, grads);
                }
            }
            Op::MulCol(a, c) => {
                let (x, s) = (val(*a), val(*c));
                if wants(*a) {
                    let mut da = g.clone();
                    if g.cols > 0 {
                        for (chunk, w) in da.data.chunks_mut(g.cols).zip(&s.data) {
                            for v in chunk {
                                *v *= w;
                            }
                        }
                    }
                    acc(*a, da, grads);
                }
                if wants(*c) {
                    let ds = (0..x.rows)
                        .map(|r| x.row(r).iter().zip(g.row(r)).map(|(p, q)| p * q).sum())
                        .collect();
                    acc(*c, Tensor::col_vector(ds), grads);
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s), grads),
            Op::AddScalar(a) => acc(*a, g.clone(), grads),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols;
                    if wants(p) {
                        let mut data = Vec::with_capacity(g.rows * w);
                        for r in 0..g.rows {
                            data.extend_from_slice(&g.row(r)[off..off + w]);
                        }
                        acc(
                            p,
                            Tensor {
                                rows: g.rows,
                                cols: w,
                                data,
                            },
                            grads,
                        );
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if wants(p) {
                        let t = Tensor {
                            rows: val(p).rows,
                            cols: g.cols,
                            data: g.data[off..off + n].to_vec(),
                        };
                        acc(p, t, grads);
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let mut da = Tensor::zeros(x.rows, x.cols);
                for r in 0..g.rows {
                    da.data[r * x.cols + start..r * x.cols + start + g.cols]
                        .copy_from_slice(g.row(r));
                }
                acc(*a, da, grads);
            }
            Op::Relu(a) => acc(*a, elementwise!(*a, |x, _, g| if x > 0.0 { g } else { 0.0 }), grads),
            Op::LeakyRelu(a, s) => {
                let s = *s;
                acc(*a, elementwise!(*a, |x, _, g| if x > 0.0 { g } else { s * g }), grads)
            }
            Op::Sigmoid(a) => acc(*a, elementwise!(*a, |_, y, g| g * y * (1.0 - y)), grads),
            Op::Tanh(a) => acc(*a, elementwise!(*a, |_, y, g| g * (1.0 - y * y)), grads),
            Op::Exp(a) => acc(*a, elementwise!(*a, |_, y, g| g * y), grads),
            Op::Log(a) => acc(*a, elementwise!(*a, |x, _, g| g / x), grads),
            Op::Abs(a) => acc(*a, elementwise!(*a, |x, _, g| g * x.signum() * (x != 0.0) as u8 as f64), grads),
            Op::Square(a) => acc(*a, elementwise!(*a, |x, _, g| 2.0 * x * g), grads),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(*a, elementwise!(*a, |x, _, g| if x >= lo && x <= hi { g } else { 0.0 }), grads)
            }
            Op::Sum(a) => {
                let x = val(*a);
                acc(*a, Tensor::full(x.rows, x.cols, g.item()), grads)
            }
            Op::SumRows(a) | Op::SumRowsCanonical(a) => {
                let x = val(*a);
                let mut da = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    da.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(&g.data);
                }
                acc(*a, da, grads);
            }
            Op::SumCols(a) => {
                let x = val(*a);
                let mut da = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    for v in &mut da.data[r * x.cols..(r + 1) * x.cols] {
                        *v = g.data[r];
                    }
                }
                acc(*a, da, grads);
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let mut da = Tensor::zeros(x.rows, x.cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (d, v) in da.data[i * x.cols..(i + 1) * x.cols].iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(*a, da, grads);
            }
            Op::SegmentSum(a, seg) | Op::SegmentSumSorted(a, seg) => {
                let x = val(*a);
                let mut data = Vec::with_capacity(x.rows * x.cols);
                for &s in seg {
                    data.extend_from_slice(g.row(s));
                }
                acc(
                    *a,
                    Tensor {
                        rows: x.rows,
                        cols: x.cols,
                        data,
                    },
                    grads,
                );
            }
            Op::SegmentSoftmax(a, seg) => {
                let y = &node.value;
                let n = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n];
                for ((&yv, &gv), &s) in y.data.iter().zip(&g.data).zip(seg) {
                    dot[s] += yv * gv;
                }
                let da = y
                    .data
                    .iter()
                    .zip(&g.data)
                    .zip(seg)
                    .map(|((&yv, &gv), &s)| yv * (gv - dot[s]))
                    .collect();
                acc(*a, Tensor::col_vector(da), grads);
            }
            Op::SegmentMax(a, seg) => {
                let x = val(*a);
                let y = &node.value;
                let mut da = Tensor::zeros(x.rows, x.cols);
                let mut taken = vec![false; y.len()];
                for (i, &s) in seg.iter().enumerate() {
                    for c in 0..x.cols {
                        let k = s * x.cols + c;
                        if !taken[k] && x.data[i * x.cols + c] == y.data[k] {
                            taken[k] = true;
                            da.data[i * x.cols + c] = g.data[k];
                        }
                    }
                }
                acc(*a, da, grads);
            }
            Op::Custom(op, inputs) => {
                let xs: Vec<&Tensor> = inputs.iter().map(|&v| &**val(v)).collect();
                let w: Vec<bool> = inputs.iter().map(|&v| wants(v)).collect();
                let gs = op.backward(&xs, &node.value, g, &w);
                for ((&v, gi), want) in inputs.iter().zip(gs).zip(w) {
                    if let (Some(gi), true) = (gi, want) {
                        acc(v, gi, grads);
                    }
                }
            }
            Op::BceWithLogits(z, labels, w) => {
                let x = val(*z);
                let n = labels.len().max(1) as f64;
                let gs = g.item();
                let dz = x
                    .data
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| {
                        let p = sigmoid(z);
                        gs * (-w * y * (1.0 - p) + (1.0 - y) * p) / n
                    })
                    .collect();
                acc(*z, Tensor::col_vector(dz), grads);
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Probability clamp used by [`bce_loss`].
pub const PROB_EPS: f64 = 1e-7;

/// Weighted binary cross-entropy of a probability, clamped away from 0 and 1.
pub fn bce_loss(p: f64, y: f64, pos_weight: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(pos_weight * y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Derivative of [`bce_loss`] with respect to `p` (zero where clamped).
pub fn bce_loss_grad(p: f64, y: f64, pos_weight: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    -(pos_weight * y / p) + (1.0 - y) / (1.0 - p)
}

/// Tape version of [`bce_loss`] over an `r x 1` probability column, averaged.
pub fn bce_loss_var(tape: &mut Tape, p: Var, labels: &[f64], pos_weight: f64) -> Result<Var> {
    let n = labels.len();
    if tape.shape(p) != [n, 1] {
        return Err(Error::ShapeMismatch {
            op: "bce_loss",
            lhs: tape.shape(p).to_vec(),
            rhs: vec![n, 1],
        });
    }
    let pc = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let lp = tape.log(pc);
    let neg = tape.scale(pc, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let lq = tape.log(one_minus);
    let wy = tape.constant(Tensor::col_vector(labels.iter().map(|y| -pos_weight * y).collect()));
    let ny = tape.constant(Tensor::col_vector(labels.iter().map(|y| -(1.0 - y)).collect()));
    let a = tape.mul(lp, wy)?;
    let b = tape.mul(lq, ny)?;
    let s = tape.add(a, b)?;
    Ok(tape.mean(s))
}

/// Named parameter tensors in a fixed (sorted) order, plus free-form
/// metadata stored alongside them in weight files.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub tensors: BTreeMap<String, Arc<Tensor>>,
    pub meta: Option<serde_json::Value>,
}

pub const WEIGHT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: [usize; 2],
    values: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .map(|t| &**t)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Places every tensor on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.param_shared(Arc::clone(v))))
                .collect(),
        }
    }

    /// Places every tensor on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant_shared(Arc::clone(v))))
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut map = serde_json::Map::new();
        map.insert(
            "format_version".into(),
            serde_json::Value::from(WEIGHT_FORMAT_VERSION),
        );
        for (k, t) in &self.tensors {
            let rec = TensorRecord {
                shape: t.shape(),
                values: t.data.clone(),
            };
            map.insert(k.clone(), serde_json::to_value(rec)?);
        }
        if let Some(meta) = &self.meta {
            map.insert("meta".into(), meta.clone());
        }
        Ok(serde_json::to_string(&serde_json::Value::Object(map))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        let serde_json::Value::Object(map) = v else {
            return Err(Error::InvalidParameter("weight file is not an object".into()));
        };
        let version = map
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::MissingParameter("format_version".into()))?;
        if version != WEIGHT_FORMAT_VERSION as u64 {
            return Err(Error::WeightVersion(version as u32));
        }
        let mut out = ParamSet::new();
        for (k, v) in map {
            if k == "format_version" {
                continue;
            }
            if k == "meta" {
                out.meta = Some(v);
                continue;
            }
            let rec: TensorRecord = serde_json::from_value(v)?;
            out.insert(k, Tensor::from_vec(rec.shape[0], rec.shape[1], rec.values)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        ParamSet::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Parameters bound to tape variables.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Gradients for every bound parameter (zeros where none flowed).
    pub fn gradients(&self, tape: &Tape, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads.take(v).unwrap_or_else(|| {
                    let [r, c] = tape.shape(v);
                    Tensor::zeros(r, c)
                });
                (k.clone(), g)
            })
            .collect()
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (k, g) in grads {
            let p = params
                .tensors
                .get(k)
                .ok_or_else(|| Error::MissingParameter(k.clone()))?;
            if p.shape() != g.shape() {
                return Err(shape_err("adam_step", p, g));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, g) in grads {
            let p = Arc::make_mut(params.tensors.get_mut(k).expect("checked above"));
            let m = self
                .m
                .entry(k.clone())
                .or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let v = self
                .v
                .entry(k.clone())
                .or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
