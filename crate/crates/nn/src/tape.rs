//! Tape-based reverse-mode differentiation.
//!
//! Every op computes its value eagerly, checks it for NaN/Inf, and (when
//! gradients are enabled) records enough to run its backward rule later.
//! [`Tape::backward`] walks the recorded nodes in reverse and returns the
//! gradients of every parameter that took part in the computation.

use crate::error::{NnError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Value assigned to masked attention logits.
pub const MASKED_LOGIT: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Derivative of a custom elementwise function, given `(x, y = f(x))`.
pub type UnaryDeriv<S> = fn(S, S) -> S;

enum Value<S> {
    Owned(Tensor<S>),
    Param(ParamId),
}

enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, S),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Unary(Var, UnaryDeriv<S>),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    CausalMask(Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    SplitHeads { x: Var, batch: usize, len: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, len: usize, heads: usize },
    Reshape(Var),
    Transpose(Var),
    SumAll(Var),
    MaeLoss { pred: Var, target: Var, mask: Var },
}

impl<S> Op<S> {
    fn for_each_input(&self, mut f: impl FnMut(Var)) {
        use Op::*;
        match self {
            Leaf | Param(_) => {}
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddTiled(a, b) => {
                f(*a);
                f(*b);
            }
            Affine(a, b, c) => {
                f(*a);
                f(*b);
                f(*c);
            }
            Scale(x, _) | Tanh(x) | Sigmoid(x) | Relu(x) | Gelu(x) | Unary(x, _) | Softmax(x)
            | CausalMask(x) | Reshape(x) | Transpose(x) | SumAll(x) => f(*x),
            SliceRows { x, .. } | SliceCols { x, .. } => f(*x),
            SplitHeads { x, .. } | MergeHeads { x, .. } => f(*x),
            LayerNorm { x, gamma, beta, .. } => {
                f(*x);
                f(*gamma);
                f(*beta);
            }
            ConcatCols(vs) | ConcatRows(vs) => vs.iter().copied().for_each(f),
            Bmm { a, b, .. } => {
                f(*a);
                f(*b);
            }
            MaeLoss { pred, target, mask } => {
                f(*pred);
                f(*target);
                f(*mask);
            }
        }
    }
}

struct Node<S> {
    value: Value<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
}

/// `c (m×n) = op(a) · op(b) + beta·c` for dense row-major buffers.
#[allow(clippy::too_many_arguments)]
fn mm<S: Scalar>(
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    beta: S,
    c: &mut [S],
) {
    let a_strides = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    S::gemm(m, k, n, a, a_strides, b, b_strides, beta, c, (n as isize, 1));
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044715);
    let half = S::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (S::one() + t);
    let dy = half * (S::one() + t)
        + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * k * x * x);
    (y, dy)
}

fn acc<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<'p, S: Scalar> Tape<'p, S> {
    /// A tape that records operations for a later [`backward`](Self::backward).
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()], grad_enabled: true }
    }

    /// A tape for pure inference: values are computed but no graph is kept.
    pub fn inference(params: &'p ParamStore<S>) -> Self {
        Self { grad_enabled: false, ..Self::new(params) }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => &self.params.get(*id).value,
        }
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(NnError::NonFinite { op: name });
        }
        let (op, requires_grad) = if self.grad_enabled {
            let mut rg = false;
            op.for_each_input(|v| rg |= self.nodes[v.0].requires_grad);
            (op, rg)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push(value, Op::Leaf, "input")
    }

    /// Trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let op = if self.grad_enabled { Op::Param(id) } else { Op::Leaf };
        self.nodes.push(Node { value: Value::Param(id), op, requires_grad: self.grad_enabled });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn expect_2d_cols(&self, op: &'static str, a: Var, b: Var, cols_a: usize, rows_b: usize) -> Result<()> {
        if cols_a != rows_b {
            return Err(NnError::Shape { op, lhs: self.shape(a), rhs: self.shape(b) });
        }
        Ok(())
    }

    /// `a · b` where `b` is a matrix and `a` is viewed as rows × cols.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 {
            return Err(NnError::Shape { op: "matmul", lhs: self.shape(a), rhs: self.shape(b) });
        }
        self.expect_2d_cols("matmul", a, b, av.cols(), bv.shape()[0])?;
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
        let mut out = vec![S::zero(); m * n];
        mm(av.data(), bv.data(), m, k, n, false, false, S::zero(), &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), "matmul")
    }

    /// `x · w + bias`, bias broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
        if wv.shape().len() != 2 {
            return Err(NnError::Shape { op: "affine", lhs: self.shape(x), rhs: self.shape(w) });
        }
        self.expect_2d_cols("affine", x, w, xv.cols(), wv.shape()[0])?;
        let (m, k, n) = (xv.rows(), xv.cols(), wv.shape()[1]);
        if bv.len() != n {
            return Err(NnError::Shape { op: "affine", lhs: self.shape(w), rhs: self.shape(bias) });
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        mm(xv.data(), wv.data(), m, k, n, false, false, S::one(), &mut out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::Affine(x, w, bias), "affine")
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NnError::Shape { op, lhs: self.shape(a), rhs: self.shape(b) });
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    /// `x[i] + y[i mod rows(y)]` row-wise; e.g. adding one positional table
    /// to every route of a batch.
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        if xv.cols() != yv.cols() || yv.rows() == 0 || xv.rows() % yv.rows() != 0 {
            return Err(NnError::Shape { op: "add_tiled", lhs: self.shape(x), rhs: self.shape(y) });
        }
        let block = yv.len();
        let mut out = xv.data().to_vec();
        for chunk in out.chunks_mut(block) {
            for (o, &v) in chunk.iter_mut().zip(yv.data()) {
                *o += v;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::AddTiled(x, y), "add_tiled")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = S::lit(c);
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * c).collect())?;
        self.push(t, Op::Scale(x, c), "scale")
    }

    fn map(&self, x: Var, f: impl Fn(S) -> S) -> Result<Tensor<S>> {
        let xv = self.value(x);
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.tanh())?;
        self.push(t, Op::Tanh(x), "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, sigmoid)?;
        self.push(t, Op::Sigmoid(x), "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| if v > S::zero() { v } else { S::zero() })?;
        self.push(t, Op::Relu(x), "relu")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| gelu_parts(v).0)?;
        self.push(t, Op::Gelu(x), "gelu")
    }

    /// Elementwise `f` with a caller-supplied derivative `deriv(x, f(x))`.
    pub fn unary(&mut self, x: Var, f: fn(S) -> S, deriv: UnaryDeriv<S>) -> Result<Var> {
        let t = self.map(x, f)?;
        self.push(t, Op::Unary(x, deriv), "unary")
    }

    pub fn softmax_last_dim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(x), "softmax")
    }

    /// Normalizes each row to zero mean / unit variance, then applies
    /// `gamma`, `beta` (both of length `cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = xv.cols();
        if gv.len() != cols || bv.len() != cols {
            return Err(NnError::Shape { op: "layer_norm", lhs: self.shape(x), rhs: self.shape(gamma) });
        }
        let rows = xv.rows();
        let n = S::lit(cols as f64);
        let eps = S::lit(LAYER_NORM_EPS);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().fold(S::zero(), |a, b| a + b) / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).fold(S::zero(), |a, b| a + b) / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let op = if self.grad_enabled {
            Op::LayerNorm { x, gamma, beta, xhat, inv_std }
        } else {
            Op::Leaf
        };
        self.push(t, op, "layer_norm")
    }

    /// Concatenates 2-D views along the last dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NnError::Invalid { op: "concat_cols", msg: "no inputs".into() })?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(NnError::Shape { op: "concat_cols", lhs: self.shape(first), rhs: self.shape(p) });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        self.push(t, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Stacks 2-D views vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NnError::Invalid { op: "concat_rows", msg: "no inputs".into() })?;
        let cols = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(NnError::Shape { op: "concat_rows", lhs: self.shape(first), rhs: self.shape(p) });
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        self.push(t, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if start + len > xv.rows() {
            return Err(NnError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {}", start + len, xv.rows()),
            });
        }
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        let t = Tensor::new(vec![len, cols], data)?;
        self.push(t, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if start + len > cols {
            return Err(NnError::Invalid {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of {cols}", start + len),
            });
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::SliceCols { x, start }, "slice_cols")
    }

    /// On `[groups, L, L]` scores, sets entry `(i, j)` to [`MASKED_LOGIT`]
    /// whenever `j > i`.
    pub fn causal_masked_fill(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(NnError::Shape { op: "causal_masked_fill", lhs: s.to_vec(), rhs: vec![] });
        }
        let l = s[1];
        let fill = S::lit(MASKED_LOGIT);
        let mut out = xv.data().to_vec();
        for block in out.chunks_mut(l * l) {
            for i in 0..l {
                for v in &mut block[i * l + i + 1..(i + 1) * l] {
                    *v = fill;
                }
            }
        }
        let t = Tensor::new(s.to_vec(), out)?;
        self.push(t, Op::CausalMask(x), "causal_masked_fill")
    }

    /// Batched matrix product over the leading dimension:
    /// `[g, n, k] · [g, k, m]`, or `· [g, m, k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let bad = || NnError::Shape { op: "bmm", lhs: sa.to_vec(), rhs: sb.to_vec() };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (g, n, k) = (sa[0], sa[1], sa[2]);
        let m = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut out = vec![S::zero(); g * n * m];
        for i in 0..g {
            mm(
                &av.data()[i * n * k..(i + 1) * n * k],
                &bv.data()[i * k * m..(i + 1) * k * m],
                n,
                k,
                m,
                false,
                trans_b,
                S::zero(),
                &mut out[i * n * m..(i + 1) * n * m],
            );
        }
        let t = Tensor::new(vec![g, n, m], out)?;
        self.push(t, Op::Bmm { a, b, trans_b }, "bmm")
    }

    /// `[batch·len, heads·hd]` → `[batch·heads, len, hd]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != batch * len || heads == 0 || xv.cols() % heads != 0 {
            return Err(NnError::Shape { op: "split_heads", lhs: self.shape(x), rhs: vec![batch, len, heads] });
        }
        let hd = xv.cols() / heads;
        let mut out = vec![S::zero(); xv.len()];
        permute_heads(xv.data(), &mut out, batch, len, heads, hd, true);
        let t = Tensor::new(vec![batch * heads, len, hd], out)?;
        self.push(t, Op::SplitHeads { x, batch, len, heads }, "split_heads")
    }

    /// Inverse of [`split_heads`](Self::split_heads).
    pub fn merge_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || s[0] != batch * heads || s[1] != len {
            return Err(NnError::Shape { op: "merge_heads", lhs: s.to_vec(), rhs: vec![batch, len, heads] });
        }
        let hd = s[2];
        let mut out = vec![S::zero(); xv.len()];
        permute_heads(xv.data(), &mut out, batch, len, heads, hd, false);
        let t = Tensor::new(vec![batch * len, heads * hd], out)?;
        self.push(t, Op::MergeHeads { x, batch, len, heads }, "merge_heads")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(NnError::Shape { op: "transpose", lhs: self.shape(x), rhs: vec![] });
        }
        let t = Tensor::new(vec![xv.cols(), xv.rows()], transpose2d(xv.data(), xv.rows(), xv.cols()))?;
        self.push(t, Op::Transpose(x), "transpose")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().fold(S::zero(), |a, b| a + b);
        self.push(Tensor::scalar(s), Op::SumAll(x), "sum_all")
    }

    /// `Σ |pred − target|·mask / Σ mask`.
    pub fn mae_loss(&mut self, pred: Var, target: Var, mask: Var) -> Result<Var> {
        let (pv, tv, mv) = (self.value(pred), self.value(target), self.value(mask));
        if pv.shape() != tv.shape() || pv.shape() != mv.shape() {
            return Err(NnError::Shape { op: "mae_loss", lhs: self.shape(pred), rhs: self.shape(target) });
        }
        let denom = mv.data().iter().copied().fold(S::zero(), |a, b| a + b);
        if denom <= S::zero() {
            return Err(NnError::EmptyMask);
        }
        let mut num = S::zero();
        for ((&p, &t), &m) in pv.data().iter().zip(tv.data()).zip(mv.data()) {
            num += (p - t).abs() * m;
        }
        self.push(Tensor::scalar(num / denom), Op::MaeLoss { pred, target, mask }, "mae_loss")
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        let Tape { params, nodes, .. } = self;
        let loss_shape = match &nodes[loss.0].value {
            Value::Owned(t) => t.shape().to_vec(),
            Value::Param(id) => params.get(*id).value.shape().to_vec(),
        };
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(NnError::NonScalarLoss(loss_shape));
        }
        let val = |v: Var| -> &Tensor<S> {
            match &nodes[v.0].value {
                Value::Owned(t) => t,
                Value::Param(id) => &params.get(*id).value,
            }
        };
        let mut out = Gradients { grads: vec![None; params.len()] };
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(loss_shape, S::one()));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let rg = |v: Var| nodes[v.0].requires_grad;
            let y = val(Var(i));
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match &mut out.grads[id.0] {
                    Some(t) => t.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                    if rg(*a) {
                        let mut ga = vec![S::zero(); m * k];
                        mm(g.data(), bv.data(), m, n, k, false, true, S::zero(), &mut ga);
                        acc(&mut grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                    }
                    if rg(*b) {
                        let mut gb = vec![S::zero(); k * n];
                        mm(av.data(), g.data(), k, m, n, true, false, S::zero(), &mut gb);
                        acc(&mut grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                    }
                }
                Op::Affine(x, w, b) => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (m, k, n) = (xv.rows(), xv.cols(), wv.shape()[1]);
                    if rg(*x) {
                        let mut gx = vec![S::zero(); m * k];
                        mm(g.data(), wv.data(), m, n, k, false, true, S::zero(), &mut gx);
                        acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                    }
                    if rg(*w) {
                        let mut gw = vec![S::zero(); k * n];
                        mm(xv.data(), g.data(), k, m, n, true, false, S::zero(), &mut gw);
                        acc(&mut grads, *w, Tensor::new(wv.shape().to_vec(), gw)?);
                    }
                    if rg(*b) {
                        let mut gb = vec![S::zero(); n];
                        for row in g.data().chunks(n) {
                            for (o, &v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, *b, Tensor::new(val(*b).shape().to_vec(), gb)?);
                    }
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if rg(*b) {
                        let neg = g.data().iter().map(|&v| -v).collect();
                        acc(&mut grads, *b, Tensor::new(g.shape().to_vec(), neg)?);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if rg(*a) {
                        let d = g.data().iter().zip(bv.data()).map(|(&gg, &bb)| gg * bb).collect();
                        acc(&mut grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                    }
                    if rg(*b) {
                        let d = g.data().iter().zip(av.data()).map(|(&gg, &aa)| gg * aa).collect();
                        acc(&mut grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                    }
                }
                Op::AddTiled(x, t) => {
                    if rg(*t) {
                        let tv = val(*t);
                        let mut gt = vec![S::zero(); tv.len()];
                        for chunk in g.data().chunks(tv.len()) {
                            for (o, &v) in gt.iter_mut().zip(chunk) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, *t, Tensor::new(tv.shape().to_vec(), gt)?);
                    }
                    if rg(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Scale(x, c) => {
                    let d = g.data().iter().map(|&v| v * *c).collect();
                    acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Tanh(x) => {
                    let d = g.data().iter().zip(y.data()).map(|(&gg, &yy)| gg * (S::one() - yy * yy)).collect();
                    acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Sigmoid(x) => {
                    let d = g.data().iter().zip(y.data()).map(|(&gg, &yy)| gg * yy * (S::one() - yy)).collect();
                    acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Relu(x) => {
                    let xv = val(*x);
                    let d = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gg, &xx)| if xx > S::zero() { gg } else { S::zero() })
                        .collect();
                    acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Gelu(x) => {
                    let xv = val(*x);
                    let d = g.data().iter().zip(xv.data()).map(|(&gg, &xx)| gg * gelu_parts(xx).1).collect();
                    acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Unary(x, deriv) => {
                    let xv = val(*x);
                    let d = g
                        .data()
                        .iter()
                        .zip(xv.data().iter().zip(y.data()))
                        .map(|(&gg, (&xx, &yy))| gg * deriv(xx, yy))
                        .collect();
                    acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Softmax(x) => {
                    let cols = y.cols();
                    let mut d = vec![S::zero(); y.len()];
                    for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.data().chunks(cols)).zip(y.data().chunks(cols)) {
                        let dot = gr.iter().zip(yr).fold(S::zero(), |s, (&a, &b)| s + a * b);
                        for ((o, &gg), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *o = yy * (gg - dot);
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(y.shape().to_vec(), d)?);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let cols = y.cols();
                    let gv = val(*gamma);
                    if rg(*gamma) || rg(*beta) {
                        let mut gg = vec![S::zero(); cols];
                        let mut gb = vec![S::zero(); cols];
                        for (gr, hr) in g.data().chunks(cols).zip(xhat.chunks(cols)) {
                            for j in 0..cols {
                                gg[j] += gr[j] * hr[j];
                                gb[j] += gr[j];
                            }
                        }
                        if rg(*gamma) {
                            acc(&mut grads, *gamma, Tensor::new(gv.shape().to_vec(), gg)?);
                        }
                        if rg(*beta) {
                            acc(&mut grads, *beta, Tensor::new(val(*beta).shape().to_vec(), gb)?);
                        }
                    }
                    if rg(*x) {
                        let n = S::lit(cols as f64);
                        let mut d = vec![S::zero(); y.len()];
                        for (r, ((dr, gr), hr)) in
                            d.chunks_mut(cols).zip(g.data().chunks(cols)).zip(xhat.chunks(cols)).enumerate()
                        {
                            let mut mean_dh = S::zero();
                            let mut mean_dh_h = S::zero();
                            for j in 0..cols {
                                let dh = gr[j] * gv.data()[j];
                                mean_dh += dh;
                                mean_dh_h += dh * hr[j];
                            }
                            mean_dh /= n;
                            mean_dh_h /= n;
                            for j in 0..cols {
                                let dh = gr[j] * gv.data()[j];
                                dr[j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                        acc(&mut grads, *x, Tensor::new(y.shape().to_vec(), d)?);
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let c = pv.cols();
                        if rg(p) {
                            let mut d = Vec::with_capacity(pv.len());
                            for row in g.data().chunks(total) {
                                d.extend_from_slice(&row[offset..offset + c]);
                            }
                            acc(&mut grads, p, Tensor::new(pv.shape().to_vec(), d)?);
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        if rg(p) {
                            let d = g.data()[offset..offset + pv.len()].to_vec();
                            acc(&mut grads, p, Tensor::new(pv.shape().to_vec(), d)?);
                        }
                        offset += pv.len();
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = val(*x);
                    let cols = xv.cols();
                    let mut d = vec![S::zero(); xv.len()];
                    d[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let (cols, len) = (xv.cols(), g.cols());
                    let mut d = vec![S::zero(); xv.len()];
                    for (dr, gr) in d.chunks_mut(cols).zip(g.data().chunks(len)) {
                        dr[*start..start + len].copy_from_slice(gr);
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::CausalMask(x) => {
                    let l = g.shape()[1];
                    let mut d = g.into_data();
                    for block in d.chunks_mut(l * l) {
                        for i in 0..l {
                            for v in &mut block[i * l + i + 1..(i + 1) * l] {
                                *v = S::zero();
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(y.shape().to_vec(), d)?);
                }
                Op::Bmm { a, b, trans_b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let (gn, n, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let m = g.shape()[2];
                    if rg(*a) {
                        let mut ga = vec![S::zero(); av.len()];
                        for i in 0..gn {
                            let gi = &g.data()[i * n * m..(i + 1) * n * m];
                            let bi = &bv.data()[i * k * m..(i + 1) * k * m];
                            // dA = dC · Bᵀ, or dC · B when B was used transposed
                            mm(gi, bi, n, m, k, false, !trans_b, S::zero(), &mut ga[i * n * k..(i + 1) * n * k]);
                        }
                        acc(&mut grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                    }
                    if rg(*b) {
                        let mut gb = vec![S::zero(); bv.len()];
                        for i in 0..gn {
                            let gi = &g.data()[i * n * m..(i + 1) * n * m];
                            let ai = &av.data()[i * n * k..(i + 1) * n * k];
                            let gbi = &mut gb[i * k * m..(i + 1) * k * m];
                            if *trans_b {
                                // B is m×k: dB = dCᵀ · A
                                mm(gi, ai, m, n, k, true, false, S::zero(), gbi);
                            } else {
                                mm(ai, gi, k, n, m, true, false, S::zero(), gbi);
                            }
                        }
                        acc(&mut grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                    }
                }
                Op::SplitHeads { x, batch, len, heads } => {
                    let xv = val(*x);
                    let hd = xv.cols() / heads;
                    let mut d = vec![S::zero(); xv.len()];
                    permute_heads(g.data(), &mut d, *batch, *len, *heads, hd, false);
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::MergeHeads { x, batch, len, heads } => {
                    let xv = val(*x);
                    let hd = xv.shape()[2];
                    let mut d = vec![S::zero(); xv.len()];
                    permute_heads(g.data(), &mut d, *batch, *len, *heads, hd, true);
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    acc(&mut grads, *x, g.reshaped(shape)?);
                }
                Op::Transpose(x) => {
                    let xv = val(*x);
                    let d = transpose2d(g.data(), g.rows(), g.cols());
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::SumAll(x) => {
                    let xv = val(*x);
                    acc(&mut grads, *x, Tensor::full(xv.shape().to_vec(), g.data()[0]));
                }
                Op::MaeLoss { pred, target, mask } => {
                    if rg(*pred) {
                        let (pv, tv, mv) = (val(*pred), val(*target), val(*mask));
                        let denom = mv.data().iter().copied().fold(S::zero(), |a, b| a + b);
                        let scale = g.data()[0] / denom;
                        let d = pv
                            .data()
                            .iter()
                            .zip(tv.data())
                            .zip(mv.data())
                            .map(|((&p, &t), &m)| {
                                let diff = p - t;
                                let sign = if diff > S::zero() {
                                    S::one()
                                } else if diff < S::zero() {
                                    -S::one()
                                } else {
                                    S::zero()
                                };
                                sign * m * scale
                            })
                            .collect();
                        acc(&mut grads, *pred, Tensor::new(pv.shape().to_vec(), d)?);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn transpose2d<S: Scalar>(data: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

// `split = true`: [batch·len, heads·hd] → [batch·heads, len, hd]; otherwise
// the inverse.
fn permute_heads<S: Scalar>(
    src: &[S],
    dst: &mut [S],
    batch: usize,
    len: usize,
    heads: usize,
    hd: usize,
    split: bool,
) {
    for b in 0..batch {
        for t in 0..len {
            for h in 0..heads {
                let flat = (b * len + t) * heads * hd + h * hd;
                let split_off = ((b * heads + h) * len + t) * hd;
                let (from, to) = if split { (flat, split_off) } else { (split_off, flat) };
                dst[to..to + hd].copy_from_slice(&src[from..from + hd]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn affine_with_zero_weights_returns_bias() {
        let mut ps = store();
        let w = ps.add("w", Tensor::zeros(vec![3, 2])).unwrap();
        let b = ps.add("b", Tensor::from_f64(vec![2], &[0.5, -1.5]).unwrap()).unwrap();
        let mut tape = Tape::new(&ps);
        let x = tape.input(Tensor::from_f64(vec![2, 3], &[1., 2., 3., -4., 5., 6.]).unwrap()).unwrap();
        let (wv, bv) = (tape.param(w), tape.param(b));
        let y = tape.affine(x, wv, bv).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let ps = store();
        let mut tape = Tape::new(&ps);
        let x = tape.input(Tensor::full(vec![2, 5], 3.7)).unwrap();
        let y = tape.softmax_last_dim(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let mut ps = store();
        let g = ps.add("g", Tensor::full(vec![7], 1.0)).unwrap();
        let b = ps.add("b", Tensor::zeros(vec![7])).unwrap();
        let data: Vec<f64> = (0..35).map(|i| ((i * 37 % 11) as f64 - 5.0) * 1.3).collect();
        let mut tape = Tape::new(&ps);
        let x = tape.input(Tensor::from_f64(vec![5, 7], &data).unwrap()).unwrap();
        let (gv, bv) = (tape.param(g), tape.param(b));
        let y = tape.layer_norm(x, gv, bv).unwrap();
        let out = tape.value(y);
        for r in 0..5 {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / 7.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn causal_mask_then_softmax_zeroes_future() {
        let ps = store();
        let mut tape = Tape::new(&ps);
        let x = tape.input(Tensor::from_f64(vec![1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap()).unwrap();
        let m = tape.causal_masked_fill(x).unwrap();
        let p = tape.softmax_last_dim(m).unwrap();
        let out = tape.value(p).data();
        assert_eq!(out[1], 0.0);
        assert_eq!(out[2], 0.0);
        assert_eq!(out[5], 0.0);
        assert_eq!(out[0], 1.0);
        for r in 0..3 {
            let s: f64 = out[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mae_loss_hand_values() {
        let ps = store();
        let mut tape = Tape::new(&ps);
        let mut run = |p: &[f64], t: &[f64], m: &[f64]| {
            let n = p.len();
            let p = tape.input(Tensor::from_f64(vec![n], p).unwrap()).unwrap();
            let t = tape.input(Tensor::from_f64(vec![n], t).unwrap()).unwrap();
            let m = tape.input(Tensor::from_f64(vec![n], m).unwrap()).unwrap();
            tape.mae_loss(p, t, m).map(|l| tape.value(l).data()[0])
        };
        assert_eq!(run(&[1., 5.], &[2., 3.], &[1., 1.]).unwrap(), 1.5);
        assert_eq!(run(&[1., 999.], &[2., 0.], &[1., 0.]).unwrap(), 1.0);
        assert_eq!(run(&[4., 4.], &[4., 4.], &[1., 1.]).unwrap(), 0.0);
        assert!(matches!(run(&[1.], &[2.], &[0.]), Err(NnError::EmptyMask)));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let ps = store();
        let mut tape = Tape::new(&ps);
        let a = tape.input(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.input(Tensor::zeros(vec![4, 2])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "matmul: shape mismatch between [2, 3] and [4, 2]");
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let ps = store();
        let mut tape = Tape::new(&ps);
        let x = tape.input(Tensor::from_f64(vec![1], &[1e300]).unwrap()).unwrap();
        let err = tape.mul(x, x).unwrap_err();
        assert!(matches!(err, NnError::NonFinite { op: "mul" }));
    }

    #[test]
    fn backward_of_sum_wx_is_outer_product() {
        // loss = Σ_ij (x·W)_ij, so dL/dW[k][j] = Σ_i x[i][k]
        let mut ps = store();
        let w = ps.add("w", Tensor::from_f64(vec![3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap()).unwrap();
        let unused = ps.add("unused", Tensor::full(vec![4], 1.0)).unwrap();
        let xs = [1., 2., 3., -1., 0.5, 4.];
        let mut tape = Tape::new(&ps);
        let x = tape.input(Tensor::from_f64(vec![2, 3], &xs).unwrap()).unwrap();
        let wv = tape.param(w);
        let y = tape.matmul(x, wv).unwrap();
        let l = tape.sum_all(y).unwrap();
        let grads = tape.backward(l).unwrap();
        let gw = grads.get(w).unwrap().data();
        let col_sums = [xs[0] + xs[3], xs[1] + xs[4], xs[2] + xs[5]];
        for k in 0..3 {
            assert_eq!(gw[k * 2], col_sums[k]);
            assert_eq!(gw[k * 2 + 1], col_sums[k]);
        }
        assert!(grads.get(unused).is_none());
        ps.accumulate(&grads);
        assert!(ps.get(unused).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut ps = store();
        let w = ps.add("w", Tensor::from_f64(vec![1, 1], &[2.0]).unwrap()).unwrap();
        for _ in 0..3 {
            let mut tape = Tape::new(&ps);
            let x = tape.input(Tensor::from_f64(vec![1, 1], &[5.0]).unwrap()).unwrap();
            let wv = tape.param(w);
            let y = tape.matmul(x, wv).unwrap();
            let l = tape.sum_all(y).unwrap();
            let g = tape.backward(l).unwrap();
            ps.accumulate(&g);
        }
        assert_eq!(ps.get(w).grad.data(), &[15.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let ps = store();
        let mut tape = Tape::new(&ps);
        let x = tape.input(Tensor::zeros(vec![2])).unwrap();
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(NnError::NonScalarLoss(_))));
    }

    #[test]
    fn split_merge_heads_round_trip() {
        let ps = store();
        let mut tape = Tape::new(&ps);
        let data: Vec<f64> = (0..2 * 3 * 8).map(|i| i as f64).collect();
        let x = tape.input(Tensor::from_f64(vec![6, 8], &data).unwrap()).unwrap();
        let s = tape.split_heads(x, 2, 3, 4).unwrap();
        assert_eq!(tape.value(s).shape(), &[8, 3, 2]);
        // batch 1, head 2, position 1 starts at flat row 4, column 4
        assert_eq!(tape.value(s).data()[((4 + 2) * 3 + 1) * 2], data[4 * 8 + 4]);
        let m = tape.merge_heads(s, 2, 3, 4).unwrap();
        assert_eq!(tape.value(m).data(), &data[..]);
    }
}
