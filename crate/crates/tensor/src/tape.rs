//! Define-by-run computation tape with reverse-mode differentiation.
//!
//! A fresh [`Tape`] is built for every forward pass. Each operation appends a
//! node holding its output value and enough context to run the vector-Jacobian
//! product later. [`Tape::backward`] walks the nodes in reverse.

use crate::error::{invalid, Result, TensorError};
use crate::gemm::gemm;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct AttnGeom {
    n_seq: usize,
    seq_len: usize,
    heads: usize,
    dim: usize,
    /// Single query position per sequence, or every position when `None`.
    query: Option<usize>,
}

impl AttnGeom {
    fn n_query(&self) -> usize {
        if self.query.is_some() {
            1
        } else {
            self.seq_len
        }
    }

    /// Token index (within a sequence) of query slot `i`.
    fn query_pos(&self, i: usize) -> usize {
        self.query.unwrap_or(i)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Abs(Var),
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanCols(Var),
    Reshape(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    OuterAdd(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<f64>,
        geom: ConvGeom,
    },
    Attention {
        qkv: Var,
        probs: Vec<f64>,
        mask: Option<Vec<f64>>,
        geom: AttnGeom,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` was not
    /// reached by the backward pass.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros shaped like `like` when the
    /// node was never reached.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

/// Records operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(invalid(op, format!("expected rank-2 input, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients flow to it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(name, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op, &[a])
    }

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_rank2("matmul", self.value(a))?;
        let (k2, n) = require_rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `[m,k] · [n,k]ᵀ -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_rank2("matmul_nt", self.value(a))?;
        let (n, k2) = require_rank2("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(mismatch("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            false,
        );
        self.push("matmul_nt", Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn row_broadcast(&mut self, name: &'static str, a: Var, b: Var, mul: bool) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        let n = ta.cols();
        if tb.len() != n || ta.shape().len() < 2 {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(tb.data()) {
                if mul {
                    *x *= y
                } else {
                    *x += y
                }
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let op = if mul { Op::MulRow(a, b) } else { Op::AddRow(a, b) };
        self.push(name, out, op, &[a, b])
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` input.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, b, false)
    }

    /// Multiplies every row of an `[m, n]` input by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, b, true)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary("powf", a, Op::Powf(a, p), |x| x.powf(p))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.powf(a, 0.5)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, Op::Abs(a), f64::abs)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("minimum", a, b, Op::Minimum(a, b), f64::min)
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(invalid("mean", "empty input"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    fn reduce_cols(&mut self, name: &'static str, a: Var, mean: bool) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let denom = if mean { n as f64 } else { 1.0 };
        let data = t.data().chunks(n).map(|r| r.iter().sum::<f64>() / denom).collect();
        let op = if mean { Op::MeanCols(a) } else { Op::SumCols(a) };
        self.push(name, Tensor::new(vec![m, 1], data)?, op, &[a])
    }

    /// Row sums: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.reduce_cols("sum_cols", a, false)
    }

    /// Row means: `[m, n] -> [m, 1]`.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        self.reduce_cols("mean_cols", a, true)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = require_rank2("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", Tensor::new(vec![n, m], data)?, Op::Transpose(a), &[a])
    }

    /// Concatenates rank-2 inputs with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_cols", "no inputs"));
        }
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != m || t.shape().len() != 2 {
                return Err(mismatch("concat_cols", self.shape(parts[0]), t.shape()));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::new(vec![m, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Stacks rank-2 inputs with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_rows", "no inputs"));
        }
        let n = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n || t.shape().len() != 2 {
                return Err(mismatch("concat_rows", self.shape(parts[0]), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(
            "concat_rows",
            Tensor::new(vec![rows, n], data)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Columns `start..end` of a rank-2 input.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = require_rank2("slice_cols", self.value(a))?;
        if start >= end || end > n {
            return Err(invalid("slice_cols", format!("range {start}..{end} out of 0..{n}")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        self.push(
            "slice_cols",
            Tensor::new(vec![m, w], data)?,
            Op::SliceCols(a, start),
            &[a],
        )
    }

    /// Selects rows of a rank-2 input (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = require_rank2("gather_rows", self.value(a))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(invalid("gather_rows", format!("row {bad} out of range {m}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        self.push(
            "gather_rows",
            Tensor::new(vec![idx.len(), n], data)?,
            Op::GatherRows(a, idx.to_vec()),
            &[a],
        )
    }

    /// Picks one column per row: `out[i] = a[i, idx[i]]`, shape `[m, 1]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = require_rank2("pick", self.value(a))?;
        if idx.len() != m {
            return Err(mismatch("pick", self.shape(a), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(invalid("pick", format!("column {bad} out of range {n}")));
        }
        let src = self.value(a).data();
        let data = idx.iter().enumerate().map(|(i, &j)| src[i * n + j]).collect();
        self.push("pick", Tensor::new(vec![m, 1], data)?, Op::Pick(a, idx.to_vec()), &[a])
    }

    /// Pairwise row sums: `out[i*K + k] = a[i] + b[k]` for `a: [M,H]`, `b: [K,H]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, h) = require_rank2("outer_add", self.value(a))?;
        let (k, h2) = require_rank2("outer_add", self.value(b))?;
        if h != h2 {
            return Err(mismatch("outer_add", self.shape(a), self.shape(b)));
        }
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * k * h);
        for i in 0..m {
            let ra = &ta[i * h..(i + 1) * h];
            for j in 0..k {
                let rb = &tb[j * h..(j + 1) * h];
                data.extend(ra.iter().zip(rb).map(|(x, y)| x + y));
            }
        }
        self.push(
            "outer_add",
            Tensor::new(vec![m * k, h], data)?,
            Op::OuterAdd(a, b),
            &[a, b],
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("softmax_rows", out, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(a), &[a])
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mu) * is);
            inv_std.push(is);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("layer_norm_rows", out, Op::LayerNormRows { x: a, inv_std }, &[a])
    }

    /// 2-D convolution. `x: [B,C,H,W]`, `w: [F,C,K,K]`, `b: [F]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        if self.value(b).len() != ws[0] {
            return Err(mismatch("conv2d", &ws, self.shape(b)));
        }
        let kernel = ws[2];
        let out_h = conv_out_extent(xs[2], kernel, stride, pad)
            .ok_or_else(|| invalid("conv2d", format!("kernel {kernel} does not fit input {xs:?}")))?;
        let out_w = conv_out_extent(xs[3], kernel, stride, pad)
            .ok_or_else(|| invalid("conv2d", format!("kernel {kernel} does not fit input {xs:?}")))?;
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            height: xs[2],
            width: xs[3],
            out_ch: ws[0],
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let (rows_c, cols_c) = (geom.col_rows(), geom.col_cols());
        let mut out_mat = vec![0.0; geom.out_ch * cols_c];
        gemm(
            geom.out_ch,
            rows_c,
            cols_c,
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut out_mat,
            false,
        );
        let plane = out_h * out_w;
        let bias = self.value(b).data();
        let mut out = vec![0.0; geom.batch * geom.out_ch * plane];
        for f in 0..geom.out_ch {
            for bi in 0..geom.batch {
                let src = &out_mat[f * cols_c + bi * plane..f * cols_c + (bi + 1) * plane];
                let dst = &mut out[(bi * geom.out_ch + f) * plane..(bi * geom.out_ch + f + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[f];
                }
            }
        }
        let value = Tensor::new(vec![geom.batch, geom.out_ch, out_h, out_w], out)?;
        self.push("conv2d", value, Op::Conv2d { x, w, b, cols, geom }, &[x, w, b])
    }

    /// Multi-head scaled dot-product attention without masking.
    ///
    /// `qkv` is `[n_seq * seq_len, 3 * dim]` holding the query, key and value
    /// projections side by side; the result is `[n_seq * seq_len, dim]`.
    /// Scores are scaled by `1/sqrt(dim / heads)`. When given, `dropout` holds
    /// one multiplier per attention weight (`n_seq * heads * seq_len²`
    /// entries, each `0` or `1/(1-p)`).
    pub fn attention(
        &mut self,
        qkv: Var,
        n_seq: usize,
        seq_len: usize,
        heads: usize,
        dropout: Option<Vec<f64>>,
    ) -> Result<Var> {
        self.attention_impl(qkv, n_seq, seq_len, heads, None, dropout)
    }

    /// Like [`Tape::attention`] but only position `query` of each sequence
    /// attends; the result is `[n_seq, dim]` and `dropout` has
    /// `n_seq * heads * seq_len` entries.
    pub fn attention_at(
        &mut self,
        qkv: Var,
        n_seq: usize,
        seq_len: usize,
        heads: usize,
        query: usize,
        dropout: Option<Vec<f64>>,
    ) -> Result<Var> {
        if query >= seq_len {
            return Err(invalid(
                "attention_at",
                format!("query position {query} outside {seq_len} tokens"),
            ));
        }
        self.attention_impl(qkv, n_seq, seq_len, heads, Some(query), dropout)
    }

    fn attention_impl(
        &mut self,
        qkv: Var,
        n_seq: usize,
        seq_len: usize,
        heads: usize,
        query: Option<usize>,
        dropout: Option<Vec<f64>>,
    ) -> Result<Var> {
        let (rows, width) = require_rank2("attention", self.value(qkv))?;
        if rows != n_seq * seq_len || width % 3 != 0 || heads == 0 || (width / 3) % heads != 0 {
            return Err(invalid(
                "attention",
                format!(
                    "qkv {:?} incompatible with {n_seq} seqs x {seq_len} tokens x {heads} heads",
                    self.shape(qkv)
                ),
            ));
        }
        let dim = width / 3;
        let geom = AttnGeom {
            n_seq,
            seq_len,
            heads,
            dim,
            query,
        };
        let nq = geom.n_query();
        let l = seq_len;
        if let Some(m) = &dropout {
            if m.len() != n_seq * heads * nq * l {
                return Err(mismatch("attention", &[n_seq * heads * nq * l], &[m.len()]));
            }
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut probs = vec![0.0; n_seq * heads * nq * l];
        let mut out = vec![0.0; n_seq * nq * dim];
        let mut row_buf = vec![0.0; l];
        for s in 0..n_seq {
            for h in 0..heads {
                let pbase = (s * heads + h) * nq * l;
                for i in 0..nq {
                    let qp = geom.query_pos(i);
                    let q = &src[(s * l + qp) * width + h * dh..][..dh];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, rb) in row_buf.iter_mut().enumerate() {
                        let k = &src[(s * l + j) * width + dim + h * dh..][..dh];
                        let d: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                        *rb = d * scale;
                        mx = mx.max(*rb);
                    }
                    let mut z = 0.0;
                    for rb in row_buf.iter_mut() {
                        *rb = (*rb - mx).exp();
                        z += *rb;
                    }
                    for j in 0..l {
                        let p = row_buf[j] / z;
                        probs[pbase + i * l + j] = p;
                        let pd = match &dropout {
                            Some(m) => p * m[pbase + i * l + j],
                            None => p,
                        };
                        if pd != 0.0 {
                            let v = &src[(s * l + j) * width + 2 * dim + h * dh..][..dh];
                            let o = &mut out[(s * nq + i) * dim + h * dh..][..dh];
                            for (oe, ve) in o.iter_mut().zip(v) {
                                *oe += pd * ve;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n_seq * nq, dim], out)?;
        self.push(
            "attention",
            value,
            Op::Attention {
                qkv,
                probs,
                mask: dropout,
                geom,
            },
            &[qkv],
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(ls.to_vec(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, n, k, gd, false, val(*b), true, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(k, m, n, val(*a), true, gd, false, gb, true);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, n, k, gd, false, val(*b), false, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(n, m, k, gd, true, val(*a), false, gb, true);
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, |i| gd[i]);
                self.acc_map(grads, *b, |i| gd[i]);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, |i| gd[i]);
                self.acc_map(grads, *b, |i| -gd[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc_map(grads, *a, |i| gd[i] * vb[i]);
                self.acc_map(grads, *b, |i| gd[i] * va[i]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc_map(grads, *a, |i| gd[i] / vb[i]);
                self.acc_map(grads, *b, |i| -gd[i] * va[i] / (vb[i] * vb[i]));
            }
            Op::AddRow(a, b) => {
                let n = self.value(*b).len();
                self.acc_map(grads, *a, |i| gd[i]);
                if let Some(gb) = self.slot(grads, *b) {
                    for row in gd.chunks(n) {
                        for (x, y) in gb.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let n = vb.len();
                self.acc_map(grads, *a, |i| gd[i] * vb[i % n]);
                if let Some(gb) = self.slot(grads, *b) {
                    for (row_g, row_a) in gd.chunks(n).zip(va.chunks(n)) {
                        for j in 0..n {
                            gb[j] += row_g[j] * row_a[j];
                        }
                    }
                }
            }
            Op::Scale(a, c) => self.acc_map(grads, *a, |i| gd[i] * c),
            Op::AddScalar(a) => self.acc_map(grads, *a, |i| gd[i]),
            Op::Relu(a) => {
                let va = val(*a);
                self.acc_map(grads, *a, |i| if va[i] > 0.0 { gd[i] } else { 0.0 });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.acc_map(grads, *a, |i| gd[i] * (1.0 - y[i] * y[i]));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                self.acc_map(grads, *a, |i| gd[i] * y[i]);
            }
            Op::Log(a) => {
                let va = val(*a);
                self.acc_map(grads, *a, |i| gd[i] / va[i]);
            }
            Op::Powf(a, p) => {
                let va = val(*a);
                self.acc_map(grads, *a, |i| gd[i] * p * va[i].powf(p - 1.0));
            }
            Op::Abs(a) => {
                let va = val(*a);
                self.acc_map(grads, *a, |i| {
                    if va[i] > 0.0 {
                        gd[i]
                    } else if va[i] < 0.0 {
                        -gd[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc_map(grads, *a, |i| if va[i] <= vb[i] { gd[i] } else { 0.0 });
                self.acc_map(grads, *b, |i| if va[i] <= vb[i] { 0.0 } else { gd[i] });
            }
            Op::Sum(a) => self.acc_map(grads, *a, |_| gd[0]),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.acc_map(grads, *a, |_| gd[0] / n);
            }
            Op::SumCols(a) => {
                let n = self.value(*a).cols();
                self.acc_map(grads, *a, |i| gd[i / n]);
            }
            Op::MeanCols(a) => {
                let n = self.value(*a).cols();
                self.acc_map(grads, *a, |i| gd[i / n] / n as f64);
            }
            Op::Reshape(a) => self.acc_map(grads, *a, |i| gd[i]),
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.acc_map(grads, *a, |idx| {
                    let (i, j) = (idx / n, idx % n);
                    gd[j * m + i]
                });
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc_map(grads, p, |idx| {
                        let (i, j) = (idx / w, idx % w);
                        gd[i * total + offset + j]
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc_map(grads, p, |idx| gd[offset + idx]);
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let n = self.value(*a).cols();
                let w = g.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, row) in gd.chunks(w).enumerate() {
                        for (j, v) in row.iter().enumerate() {
                            ga[i * n + start + j] += v;
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let n = self.value(*a).cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            ga[src * n + j] += gd[r * n + j];
                        }
                    }
                }
            }
            Op::Pick(a, idx) => {
                let n = self.value(*a).cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, &j) in idx.iter().enumerate() {
                        ga[i * n + j] += gd[i];
                    }
                }
            }
            Op::OuterAdd(a, b) => {
                let h = self.value(*a).cols();
                let (m, k) = (self.value(*a).rows(), self.value(*b).rows());
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..m {
                        for j in 0..k {
                            let row = &gd[(i * k + j) * h..][..h];
                            for (x, y) in ga[i * h..(i + 1) * h].iter_mut().zip(row) {
                                *x += y;
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..m {
                        for j in 0..k {
                            let row = &gd[(i * k + j) * h..][..h];
                            for (x, y) in gb[j * h..(j + 1) * h].iter_mut().zip(row) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = g.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gr, yr), out) in gd.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let y = node.value.data();
                let n = g.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gr, yr), out) in gd.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            out[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNormRows { x, inv_std } => {
                let y = node.value.data();
                let n = g.cols();
                if let Some(ga) = self.slot(grads, *x) {
                    for (r, ((gr, yr), out)) in gd.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)).enumerate() {
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            out[j] += inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, cols, geom } => {
                let plane = geom.out_h * geom.out_w;
                let cols_c = geom.col_cols();
                let rows_c = geom.col_rows();
                let mut g_mat = vec![0.0; geom.out_ch * cols_c];
                for bi in 0..geom.batch {
                    for f in 0..geom.out_ch {
                        let src = &gd[(bi * geom.out_ch + f) * plane..][..plane];
                        g_mat[f * cols_c + bi * plane..][..plane].copy_from_slice(src);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for f in 0..geom.out_ch {
                        gb[f] += g_mat[f * cols_c..(f + 1) * cols_c].iter().sum::<f64>();
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    gemm(geom.out_ch, cols_c, rows_c, &g_mat, false, cols, true, gw, true);
                }
                if self.nodes[x.0].needs_grad {
                    let mut gcols = vec![0.0; rows_c * cols_c];
                    gemm(
                        rows_c,
                        geom.out_ch,
                        cols_c,
                        val(*w),
                        true,
                        &g_mat,
                        false,
                        &mut gcols,
                        false,
                    );
                    if let Some(gx) = self.slot(grads, *x) {
                        col2im_acc(&gcols, geom, gx);
                    }
                }
            }
            Op::Attention { qkv, probs, mask, geom } => {
                if let Some(gq) = self.slot(grads, *qkv) {
                    attention_backward(val(*qkv), gd, probs, mask.as_deref(), geom, gq);
                }
            }
        }
    }

    /// Mutable gradient buffer for `v`, allocated on first use. `None` when
    /// `v` does not need a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let entry = &mut grads[v.0];
        if entry.is_none() {
            *entry = Some(Tensor::zeros(self.shape(v)));
        }
        entry.as_mut().map(|t| t.data_mut())
    }

    fn acc_map(&self, grads: &mut [Option<Tensor>], v: Var, f: impl Fn(usize) -> f64) {
        if let Some(buf) = self.slot(grads, v) {
            for (i, x) in buf.iter_mut().enumerate() {
                *x += f(i);
            }
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (rows_c, cols_c) = (g.col_rows(), g.col_cols());
    let plane = g.out_h * g.out_w;
    let mut cols = vec![0.0; rows_c * cols_c];
    for c in 0..g.in_ch {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let r = (c * g.kernel + ki) * g.kernel + kj;
                let row = &mut cols[r * cols_c..(r + 1) * cols_c];
                for b in 0..g.batch {
                    let xb = &x[(b * g.in_ch + c) * g.height * g.width..][..g.height * g.width];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.width as isize {
                                continue;
                            }
                            row[b * plane + oh * g.out_w + ow] = xb[ih as usize * g.width + iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc(gcols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let cols_c = g.col_cols();
    let plane = g.out_h * g.out_w;
    for c in 0..g.in_ch {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let r = (c * g.kernel + ki) * g.kernel + kj;
                let row = &gcols[r * cols_c..(r + 1) * cols_c];
                for b in 0..g.batch {
                    let base = (b * g.in_ch + c) * g.height * g.width;
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.width as isize {
                                continue;
                            }
                            gx[base + ih as usize * g.width + iw as usize] += row[b * plane + oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

fn attention_backward(src: &[f64], gout: &[f64], probs: &[f64], mask: Option<&[f64]>, geom: &AttnGeom, gq: &mut [f64]) {
    let (n_seq, l, heads, dim) = (geom.n_seq, geom.seq_len, geom.heads, geom.dim);
    let nq = geom.n_query();
    let width = 3 * dim;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; nq * l];
    for s in 0..n_seq {
        for h in 0..heads {
            let pbase = (s * heads + h) * nq * l;
            // dP (w.r.t. the dropped weights), and dV.
            for i in 0..nq {
                let go = &gout[(s * nq + i) * dim + h * dh..][..dh];
                for j in 0..l {
                    let v = &src[(s * l + j) * width + 2 * dim + h * dh..][..dh];
                    let d: f64 = go.iter().zip(v).map(|(a, b)| a * b).sum();
                    let m = mask.map_or(1.0, |m| m[pbase + i * l + j]);
                    dp[i * l + j] = d * m;
                    let pd = probs[pbase + i * l + j] * m;
                    if pd != 0.0 {
                        let gv = &mut gq[(s * l + j) * width + 2 * dim + h * dh..][..dh];
                        for (x, y) in gv.iter_mut().zip(go) {
                            *x += pd * y;
                        }
                    }
                }
            }
            // Softmax backward, then into queries and keys.
            for i in 0..nq {
                let p = &probs[pbase + i * l..][..l];
                let dot: f64 = (0..l).map(|j| dp[i * l + j] * p[j]).sum();
                for j in 0..l {
                    let ds = p[j] * (dp[i * l + j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let qi = (s * l + geom.query_pos(i)) * width + h * dh;
                    let kj = (s * l + j) * width + dim + h * dh;
                    for e in 0..dh {
                        let q = src[qi + e];
                        let k = src[kj + e];
                        gq[qi + e] += ds * k;
                        gq[kj + e] += ds * q;
                    }
                }
            }
        }
    }
}
