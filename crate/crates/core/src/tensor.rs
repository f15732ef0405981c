//! Dense 2-D tensors and a tape-based reverse-mode differentiator.
//!
//! Every value is a row-major `rows x cols` matrix of `f64`; scalars are
//! `1 x 1`. A [`Tape`] records primitive applications in topological order
//! and [`Tape::backward`] walks it once in reverse, accumulating exact
//! gradients for leaves and parameters.
//!
//! ```
//! use arac_core::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new(&[]);
//! let x = tape.leaf(Tensor::new(1, 3, vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let y = tape.sum(sq);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use std::sync::Arc;

use thiserror::Error;

/// Variance stabilizer inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("tensor data length {len} does not match shape {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite value in tensor")]
    NonFinite,
    #[error("attention mask row {0} has no unmasked entry")]
    FullyMaskedRow(usize),
    #[error("backward needs a 1x1 output, got {0:?}")]
    OutputNotScalar((usize, usize)),
    #[error("index {index} out of range for {len} rows/cols")]
    IndexOutOfRange { index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    /// Checked constructor: the length must match and every entry must be
    /// finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(1, 1, vec![v])
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self::raw(1, data.len(), data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::raw(rows, cols, data)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

// ---------------------------------------------------------------------------
// kernels

/// `out[m x n] += a[m x k] * b[k x n]`
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m x n] += a[m x k] * b[n x k]^T`
fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m x n] += a[k x m]^T * b[k x n]`
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Row-wise softmax restricted to `mask`; masked entries are exactly zero.
fn masked_softmax_rows(x: &[f64], cols: usize, mask: &[bool]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    for (r, (xr, or)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let mr = &mask[r * cols..(r + 1) * cols];
        let max = xr
            .iter()
            .zip(mr)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(TensorError::FullyMaskedRow(r));
        }
        let mut sum = 0.0;
        for ((o, &v), &m) in or.iter_mut().zip(xr).zip(mr) {
            if m {
                *o = (v - max).exp();
                sum += *o;
            }
        }
        let inv = 1.0 / sum;
        for (o, &m) in or.iter_mut().zip(mr) {
            if m {
                *o *= inv;
            }
        }
    }
    Ok(out)
}

/// Scaled dot-product attention with a boolean mask, evaluated directly.
///
/// `q` is `m x d`, `k` and `v` are `n x d`, `mask` is `m x n` row-major.
/// Row `i` of the result is `sum_j w_ij v_j` where `w_ij` is the softmax of
/// `q_i . k_j / sqrt(d)` over the unmasked `j`.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let weights = attention_weights(q, k, mask)?;
    if v.rows != k.rows {
        return Err(TensorError::ShapeMismatch {
            op: "masked_attention",
            left: k.shape(),
            right: v.shape(),
        });
    }
    let mut out = vec![0.0; q.rows * v.cols];
    gemm_nn(q.rows, k.rows, v.cols, weights.data(), &v.data, &mut out);
    Ok(Tensor::raw(q.rows, v.cols, out))
}

/// The attention weight matrix `w` used by [`masked_attention`].
pub fn attention_weights(q: &Tensor, k: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if q.cols != k.cols || mask.len() != q.rows * k.rows {
        return Err(TensorError::ShapeMismatch {
            op: "masked_attention",
            left: q.shape(),
            right: k.shape(),
        });
    }
    let mut scores = vec![0.0; q.rows * k.rows];
    gemm_nt(q.rows, q.cols, k.rows, &q.data, &k.data, &mut scores);
    let scale = 1.0 / (q.cols as f64).sqrt();
    scores.iter_mut().for_each(|s| *s *= scale);
    Ok(Tensor::raw(q.rows, k.rows, masked_softmax_rows(&scores, k.rows, mask)?))
}

// ---------------------------------------------------------------------------
// tape

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Log(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation over parameter values borrowed from the caller.
pub struct Tape<'p> {
    params: &'p [Tensor],
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, `None` if it does not
    /// influence the output.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to parameter `id`.
    pub fn param(&self, id: usize) -> Option<&Tensor> {
        self.params.get(id).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => &self.params[id],
            _ => &self.nodes[v.0].value,
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter `id` of the borrowed parameter slice. Repeated calls return
    /// the same handle.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(Tensor::zeros(0, 0), Op::Param(id), true);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols != bv.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let mut out = vec![0.0; av.rows * bv.cols];
        gemm_nn(av.rows, av.cols, bv.cols, &av.data, &bv.data, &mut out);
        let t = Tensor::raw(av.rows, bv.cols, out);
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMul(a, b), g))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols != bv.cols {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let mut out = vec![0.0; av.rows * bv.rows];
        gemm_nt(av.rows, av.cols, bv.rows, &av.data, &bv.data, &mut out);
        let t = Tensor::raw(av.rows, bv.rows, out);
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMulNT(a, b), g))
    }

    fn zip(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op, av, bv)?;
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::raw(av.rows, av.cols, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), g))
    }

    /// Adds the `1 x c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows != 1 || rv.cols != av.cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: av.shape(),
                right: rv.shape(),
            });
        }
        let mut data = av.data.clone();
        for chunk in data.chunks_mut(av.cols) {
            for (x, &b) in chunk.iter_mut().zip(&rv.data) {
                *x += b;
            }
        }
        let t = Tensor::raw(av.rows, av.cols, data);
        let g = self.needs(a) || self.needs(row);
        Ok(self.push(t, Op::AddRow(a, row), g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::raw(av.rows, av.cols, av.data.iter().map(|x| x * s).collect());
        let g = self.needs(a);
        self.push(t, Op::Scale(a, s), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::raw(av.rows, av.cols, av.data.iter().map(|&x| x.max(0.0)).collect());
        let g = self.needs(a);
        self.push(t, Op::Relu(a), g)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::raw(av.rows, av.cols, av.data.iter().map(|x| x.ln()).collect());
        let g = self.needs(a);
        self.push(t, Op::Log(a), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::raw(av.rows, av.cols, av.data.iter().map(|x| x.exp()).collect());
        let g = self.needs(a);
        self.push(t, Op::Exp(a), g)
    }

    /// Row-wise layer normalization with `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols;
        if gv.shape() != (1, c) || bv.shape() != (1, c) {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape(),
                right: gv.shape(),
            });
        }
        let mut out = vec![0.0; xv.data.len()];
        let mut xhat = vec![0.0; xv.data.len()];
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data[j] + bv.data[j];
            }
        }
        let t = Tensor::raw(xv.rows, c, out);
        let g = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    /// Row-wise softmax over the entries where `mask` is true (all entries
    /// when `mask` is `None`).
    pub fn masked_softmax(&mut self, x: Var, mask: Option<Arc<[bool]>>) -> Result<Var> {
        let xv = self.value(x);
        let out = match &mask {
            Some(m) => {
                if m.len() != xv.data.len() {
                    return Err(TensorError::ShapeMismatch {
                        op: "masked_softmax",
                        left: xv.shape(),
                        right: (m.len(), 1),
                    });
                }
                masked_softmax_rows(&xv.data, xv.cols, m)?
            }
            None => masked_softmax_rows(&xv.data, xv.cols, &vec![true; xv.data.len()])?,
        };
        let t = Tensor::raw(xv.rows, xv.cols, out);
        let g = self.needs(x);
        Ok(self.push(t, Op::MaskedSoftmax(x), g))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.data.clone();
        for row in out.chunks_mut(xv.cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::raw(xv.rows, xv.cols, out);
        let g = self.needs(x);
        self.push(t, Op::LogSoftmax(x), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows;
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: (rows, cols),
                    right: v.shape(),
                });
            }
            cols += v.cols;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::raw(rows, cols, data);
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: (0, cols),
                    right: v.shape(),
                });
            }
            data.extend_from_slice(&v.data);
        }
        let rows = data.len() / cols.max(1);
        let t = Tensor::raw(rows, cols, data);
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), g))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                len: av.cols,
            });
        }
        let mut data = Vec::with_capacity(av.rows * len);
        for r in 0..av.rows {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let t = Tensor::raw(av.rows, len, data);
        let g = self.needs(a);
        Ok(self.push(t, Op::SliceCols(a, start), g))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * av.cols);
        for &i in idx {
            if i >= av.rows {
                return Err(TensorError::IndexOutOfRange { index: i, len: av.rows });
            }
            data.extend_from_slice(av.row(i));
        }
        let t = Tensor::raw(idx.len(), av.cols, data);
        let g = self.needs(a);
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec()), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let g = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data.iter().sum::<f64>() / av.data.len() as f64;
        let g = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), g)
    }

    /// Column means, `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = vec![0.0; av.cols];
        for row in av.data.chunks(av.cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / av.rows as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let t = Tensor::raw(1, av.cols, out);
        let g = self.needs(a);
        self.push(t, Op::MeanRows(a), g)
    }

    /// Multi-head masked attention: columns of `q`, `k`, `v` are split into
    /// `heads` equal blocks, each block attends independently with scale
    /// `1/sqrt(d_head)`, and the head outputs are concatenated.
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<Arc<[bool]>>,
    ) -> Result<Var> {
        let d = self.value(q).cols;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.slice_cols(q, h * dh, dh)?,
                    self.slice_cols(k, h * dh, dh)?,
                    self.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = self.matmul_nt(qh, kh)?;
            let scores = self.scale(scores, scale);
            let w = self.masked_softmax(scores, mask.clone())?;
            outs.push(self.matmul(w, vh)?);
        }
        if heads == 1 {
            Ok(outs[0])
        } else {
            self.concat_cols(&outs)
        }
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.value(output).shape();
        if out_shape != (1, 1) {
            return Err(TensorError::OutputNotScalar(out_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params = vec![None; self.params.len()];
        for (id, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads[v.0].take() {
                    let (r, c) = self.params[id].shape();
                    params[id] = Some(Tensor::raw(r, c, g));
                }
            }
        }
        let nodes = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| {
                    let (r, c) = self.value(Var(i)).shape();
                    Tensor::raw(r, c, g)
                })
            })
            .collect();
        Ok(Gradients { nodes, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.value(v).data.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Const | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nt(av.rows, bv.cols, bv.rows, g, &bv.data, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(av.cols, av.rows, bv.cols, &av.data, g, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                // c = a b^T: da = g b, db = g^T a
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nn(av.rows, bv.rows, bv.cols, g, &bv.data, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(bv.rows, av.rows, av.cols, g, &av.data, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(&bv.data) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(&av.data) {
                        *x += gi * ai;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let cols = out.cols;
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), ai) in ga.iter_mut().zip(g).zip(&av.data) {
                        if *ai > 0.0 {
                            *x += gi;
                        }
                    }
                }
            }
            Op::Log(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), ai) in ga.iter_mut().zip(g).zip(&av.data) {
                        *x += gi / ai;
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), oi) in ga.iter_mut().zip(g).zip(&out.data) {
                        *x += gi * oi;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = out.cols;
                let gv = self.value(*gain);
                if let Some(gg) = self.acc(grads, *gain) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let cf = c as f64;
                    for r in 0..out.rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gv.data[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let k = inv_std[r] / cf;
                        for j in 0..c {
                            let dh = gr[j] * gv.data[j];
                            gx[r * c + j] += k * (cf * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::MaskedSoftmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let c = out.cols;
                    for ((wr, gr), xr) in out.data.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                        let s = dot(wr, gr);
                        for j in 0..c {
                            xr[j] += wr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let c = out.cols;
                    for ((yr, gr), xr) in out.data.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            xr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let c = out.cols;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols;
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..out.rows {
                            let src = &g[r * c + offset..r * c + offset + pc];
                            gp[r * pc..(r + 1) * pc].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).data.len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x += y);
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.value(*a).cols;
                let len = out.cols;
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..out.rows {
                        let dst = &mut ga[r * ac + start..r * ac + start + len];
                        dst.iter_mut().zip(&g[r * len..(r + 1) * len]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let c = out.cols;
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, &i) in idx.iter().enumerate() {
                        ga[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[k * c..(k + 1) * c])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows;
                if let Some(ga) = self.acc(grads, *a) {
                    let inv = 1.0 / rows as f64;
                    for chunk in ga.chunks_mut(out.cols) {
                        chunk.iter_mut().zip(g).for_each(|(x, y)| *x += y * inv);
                    }
                }
            }
        }
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences and returns the largest relative error
/// `|analytic - fd| / max(1, |analytic|, |fd|)` over all coordinates of `x`.
pub fn grad_check<F, E>(f: F, x: &Tensor, eps: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape<'_>, Var) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new(&[]);
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.rows, x.cols));
    let eval = |xp: Tensor| -> std::result::Result<f64, E> {
        let mut t = Tape::new(&[]);
        let v = t.constant(xp);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data[i] += eps;
        let mut minus = x.clone();
        minus.data[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data[i];
        worst = worst.max((a - fd).abs() / 1f64.max(a.abs()).max(fd.abs()));
    }
    Ok(worst)
}

/// Like [`grad_check`] but over a parameter slice. `coords` selects which
/// `(param id, flat index)` coordinates are perturbed.
pub fn grad_check_params<F, E>(
    params: &[Tensor],
    coords: &[(usize, usize)],
    f: F,
    eps: f64,
) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape<'_>) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new(params);
    let y = f(&mut tape)?;
    let grads = tape.backward(y)?;
    let eval = |ps: &[Tensor]| -> std::result::Result<f64, E> {
        let mut t = Tape::new(ps);
        let out = f(&mut t)?;
        Ok(t.value(out).item())
    };
    let mut worst: f64 = 0.0;
    let mut scratch = params.to_vec();
    for &(id, i) in coords {
        let orig = scratch[id].data[i];
        scratch[id].data[i] = orig + eps;
        let fp = eval(&scratch)?;
        scratch[id].data[i] = orig - eps;
        let fm = eval(&scratch)?;
        scratch[id].data[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let a = grads.param(id).map_or(0.0, |g| g.data[i]);
        worst = worst.max((a - fd).abs() / 1f64.max(a.abs()).max(fd.abs()));
    }
    Ok(worst)
}
