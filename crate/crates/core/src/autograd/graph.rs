//! Tape-style reverse-mode differentiation over 2-D tensors.
//!
//! Nodes are appended to an arena as operations run, so the arena order is
//! already a topological order and [`Graph::backward`] is a single reverse
//! sweep. A node only records a gradient edge when at least one of its
//! inputs requires a gradient; constants and frozen parameters cost nothing
//! on the backward pass.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Cosh,
    Sinh,
    Acosh,
    Asin,
    Acos,
    Gelu,
    /// `sinh(t)/t`, continuous through `t = 0`.
    Sinhc,
    /// `acosh(max(1, x))`. The derivative is taken at
    /// `max(x, ACOSH_GRAD_FLOOR)` so it stays finite as `x -> 1`, and is 0
    /// where the clamp is active.
    AcoshClamped,
    /// `acos(clamp(x, -1, 1))`. The derivative is evaluated with `|x|`
    /// capped at `ACOS_GRAD_CAP` and is 0 where the clamp is active.
    AcosClamped,
}

/// Lower bound on the `acosh` argument used for derivatives.
pub const ACOSH_GRAD_FLOOR: f64 = 1.0 + 1e-7;

/// Upper bound on `|x|` used for `acos` derivatives.
pub const ACOS_GRAD_CAP: f64 = 1.0 - 1e-7;

/// `g / den`, with the infinite derivative at a domain boundary replaced by
/// the zero subgradient.
fn boundary_div(g: f64, den: f64) -> f64 {
    if den > 0.0 {
        g / den
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub n_seq: usize,
    pub seq_len: usize,
    pub n_heads: usize,
    pub causal: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Binary { a: Var, b: Var, kind: Binary },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Unary { a: Var, kind: Unary },
    Clamp { a: Var, lo: f64, hi: f64 },
    SumAll { a: Var },
    SumRows { a: Var },
    SumCols { a: Var },
    RowNorm { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxRows { a: Var },
    LogSoftmaxRows { a: Var },
    GatherRows { a: Var, idx: Vec<usize> },
    MeanPool { a: Var, group: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    Transpose { a: Var },
    Diag { a: Var },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
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

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Sums `g` (of the broadcast output shape) back down to `shape`.
fn reduce_to(g: &Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let (rows, cols) = g.shape();
    let mut out = Tensor::zeros(shape.0, shape.1);
    let o = out.data_mut();
    for r in 0..rows {
        let row = g.row_slice(r);
        let base = if shape.0 == 1 { 0 } else { r * shape.1 };
        if shape.1 == 1 {
            o[base] += row.iter().sum::<f64>();
        } else {
            for (acc, x) in o[base..base + cols].iter_mut().zip(row) {
                *acc += x;
            }
        }
    }
    out
}

/// `f(x, y)` over the broadcast `shape`, where `x` and `y` may have unit
/// dimensions.
fn broadcast_zip(x: &Tensor, y: &Tensor, shape: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (rows, cols) = shape;
    let (sx, sy) = (x.shape(), y.shape());
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let xr = x.row_slice(if sx.0 == 1 { 0 } else { r });
        let yr = y.row_slice(if sy.0 == 1 { 0 } else { r });
        match (sx.1 == cols, sy.1 == cols) {
            (true, true) => data.extend(xr.iter().zip(yr).map(|(&a, &b)| f(a, b))),
            (true, false) => data.extend(xr.iter().map(|&a| f(a, yr[0]))),
            (false, true) => data.extend(yr.iter().map(|&b| f(xr[0], b))),
            (false, false) => data.extend((0..cols).map(|_| f(xr[0], yr[0]))),
        }
    }
    Tensor::new(rows, cols, data).expect("broadcast shape")
}

const SINHC_TAYLOR_CUTOFF: f64 = 1e-4;

/// `sinh(t)/t` with the removable singularity at zero handled by a series.
pub fn sinhc(t: f64) -> f64 {
    if t.abs() < SINHC_TAYLOR_CUTOFF {
        let t2 = t * t;
        1.0 + t2 / 6.0 + t2 * t2 / 120.0
    } else {
        t.sinh() / t
    }
}

fn sinhc_grad(t: f64) -> f64 {
    if t.abs() < SINHC_TAYLOR_CUTOFF {
        t / 3.0 + t * t * t / 30.0
    } else {
        (t * t.cosh() - t.sinh()) / (t * t)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    // ---------------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::invalid(format!(
                "matmul shape mismatch: {:?} x {:?}{}",
                (m, k),
                (br, bc),
                if trans_b { "^T" } else { "" }
            )));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), trans_b, 0.0, out.data_mut());
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose { a }, rg)
    }

    // ---------------------------------------------------------------------
    // Elementwise (with broadcasting over unit dimensions)
    // ---------------------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        let (rows, cols) = broadcast_shape(sa, sb)
            .ok_or_else(|| Error::invalid(format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let out = if sa == sb {
            self.value(a).zip_map(self.value(b), f)
        } else {
            broadcast_zip(self.value(a), self.value(b), (rows, cols), f)
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Binary { a, b, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar { a }, rg)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |x| -x,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
            Unary::Cosh => f64::cosh,
            Unary::Sinh => f64::sinh,
            Unary::Acosh => f64::acosh,
            Unary::Asin => f64::asin,
            Unary::Acos => f64::acos,
            Unary::Gelu => gelu,
            Unary::Sinhc => sinhc,
            Unary::AcoshClamped => |x| x.max(1.0).acosh(),
            Unary::AcosClamped => |x| x.clamp(-1.0, 1.0).acos(),
        };
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, Op::Unary { a, kind }, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn cosh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cosh)
    }
    pub fn sinh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sinh)
    }
    pub fn acosh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Acosh)
    }
    pub fn asin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Asin)
    }
    pub fn acos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Acos)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn sinhc(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sinhc)
    }
    pub fn acosh_clamped(&mut self, a: Var) -> Var {
        self.unary(a, Unary::AcoshClamped)
    }
    pub fn acos_clamped(&mut self, a: Var) -> Var {
        self.unary(a, Unary::AcosClamped)
    }

    /// Elementwise clamp to `[lo, hi]`. The gradient is passed only strictly
    /// inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(out, Op::Clamp { a, lo, hi }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.clamp(a, 0.0, f64::INFINITY)
    }

    // ---------------------------------------------------------------------
    // Reductions
    // ---------------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::SumAll { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum across columns: `m x n -> m x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::column((0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect());
        let rg = self.rg(&[a]);
        self.push(out, Op::SumRows { a }, rg)
    }

    /// Sum down rows: `m x n -> 1 x n`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (o, x) in out.iter_mut().zip(t.row_slice(r)) {
                *o += x;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::row(out), Op::SumCols { a }, rg)
    }

    /// Euclidean norm of each row: `m x n -> m x 1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::column(
            (0..t.rows()).map(|r| t.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt()).collect(),
        );
        let rg = self.rg(&[a]);
        self.push(out, Op::RowNorm { a }, rg)
    }

    // ---------------------------------------------------------------------
    // Network building blocks
    // ---------------------------------------------------------------------

    /// Row-wise layer normalization with affine `gain`/`bias` (`1 x d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, d) = self.value(x).shape();
        if self.value(gain).shape() != (1, d) || self.value(bias).shape() != (1, d) {
            return Err(Error::invalid(format!("layer_norm affine terms must be 1x{d}")));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(Tensor::new(rows, d, out)?, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = t.shape();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_into(t.row_slice(r), &mut out[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(rows, cols, out).expect("shape"), Op::SoftmaxRows { a }, rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = t.shape();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = t.row_slice(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for c in 0..cols {
                out[r * cols + c] = row[c] - lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(rows, cols, out).expect("shape"), Op::LogSoftmaxRows { a }, rg)
    }

    /// Selects rows by index (embedding lookup and token pooling).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.shape();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::invalid(format!("row index {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(t.row_slice(i));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(idx.len(), cols, out)?, Op::GatherRows { a, idx: idx.to_vec() }, rg))
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn mean_pool(&mut self, a: Var, group: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.shape();
        if group == 0 || rows % group != 0 {
            return Err(Error::invalid(format!("cannot pool {rows} rows in groups of {group}")));
        }
        let n = rows / group;
        let mut out = vec![0.0; n * cols];
        for r in 0..rows {
            let o = &mut out[(r / group) * cols..(r / group + 1) * cols];
            for (acc, x) in o.iter_mut().zip(t.row_slice(r)) {
                *acc += x;
            }
        }
        for x in &mut out {
            *x /= group as f64;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(n, cols, out)?, Op::MeanPool { a, group }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|p| self.value(*p).cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(Error::invalid("concat_rows column mismatch"));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(rows, cols, data)?, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|p| self.value(*p).rows()).unwrap_or(0);
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::invalid("concat_cols row mismatch"));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(rows, cols, data)?, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(Error::invalid("slice_cols out of range"));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let rows = t.rows();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(rows, len, data)?, Op::SliceCols { a, start }, rg))
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != t.cols() {
            return Err(Error::invalid("diag of non-square matrix"));
        }
        let out = Tensor::column((0..t.rows()).map(|i| t.get(i, i)).collect());
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Diag { a }, rg))
    }

    /// Multi-head scaled dot-product attention over `n_seq` stacked
    /// sequences of `seq_len` rows each.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (rows, d) = self.value(q).shape();
        if self.value(k).shape() != (rows, d) || self.value(v).shape() != (rows, d) {
            return Err(Error::invalid("attention q/k/v shapes differ"));
        }
        if rows != spec.n_seq * spec.seq_len || spec.n_heads == 0 || d % spec.n_heads != 0 {
            return Err(Error::invalid(format!("attention layout {spec:?} does not fit {rows}x{d}")));
        }
        let t = spec.seq_len;
        let dh = d / spec.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; spec.n_seq * spec.n_heads * t * t];
        let mut qh = vec![0.0; t * dh];
        let mut kh = vec![0.0; t * dh];
        let mut vh = vec![0.0; t * dh];
        let mut oh = vec![0.0; t * dh];
        let mut scores = vec![0.0; t * t];
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for s in 0..spec.n_seq {
            for h in 0..spec.n_heads {
                copy_head(qv, s, h, t, d, dh, &mut qh);
                copy_head(kv, s, h, t, d, dh, &mut kh);
                copy_head(vv, s, h, t, d, dh, &mut vh);
                gemm(t, dh, t, scale, &qh, false, &kh, true, 0.0, &mut scores);
                let p = &mut probs[(s * spec.n_heads + h) * t * t..(s * spec.n_heads + h + 1) * t * t];
                for i in 0..t {
                    let valid = if spec.causal { i + 1 } else { t };
                    let (row, prow) = (&scores[i * t..i * t + valid], &mut p[i * t..i * t + valid]);
                    softmax_into(row, prow);
                }
                gemm(t, t, dh, 1.0, p, false, &vh, false, 0.0, &mut oh);
                paste_head(&oh, s, h, t, d, dh, &mut out);
            }
        }
        let rg = self.rg(&[q, k, v]);
        if !rg {
            probs = Vec::new();
        }
        Ok(self.push(Tensor::new(rows, d, out)?, Op::Attention { q, k, v, spec, probs }, rg))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Accumulates chain-rule gradients from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::invalid(format!(
                "backward requires a scalar root, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            // Interior gradients are not needed after propagation.
            grads[i] = None;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.shape();
                let n = out.cols();
                if self.nodes[a.0].requires_grad {
                    // dA = G * op(B)^T
                    let mut da = Tensor::zeros(m, k);
                    gemm(m, n, k, 1.0, g.data(), false, vb.data(), !trans_b, 0.0, da.data_mut());
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = if *trans_b {
                        // B is n x k: dB = G^T * A
                        let mut db = Tensor::zeros(n, k);
                        gemm(n, m, k, 1.0, g.data(), true, va.data(), false, 0.0, db.data_mut());
                        db
                    } else {
                        let mut db = Tensor::zeros(k, n);
                        gemm(k, m, n, 1.0, va.data(), true, g.data(), false, 0.0, db.data_mut());
                        db
                    };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Binary { a, b, kind } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (va.shape(), vb.shape());
                let shape = g.shape();
                if self.nodes[a.0].requires_grad {
                    let full = match kind {
                        Binary::Add | Binary::Sub => None,
                        Binary::Mul => Some(broadcast_zip(g, vb, shape, |g, y| g * y)),
                        Binary::Div => Some(broadcast_zip(g, vb, shape, |g, y| g / y)),
                    };
                    self.accumulate(grads, *a, reduce_to(full.as_ref().unwrap_or(g), sa));
                }
                if self.nodes[b.0].requires_grad {
                    let full = match kind {
                        Binary::Add => None,
                        Binary::Sub => Some(g.scale(-1.0)),
                        Binary::Mul => Some(broadcast_zip(g, va, shape, |g, x| g * x)),
                        Binary::Div => {
                            let ga = broadcast_zip(g, va, shape, |g, x| -g * x);
                            Some(broadcast_zip(&ga, vb, shape, |t, y| t / (y * y)))
                        }
                    };
                    self.accumulate(grads, *b, reduce_to(full.as_ref().unwrap_or(g), sb));
                }
            }
            Op::Scale { a, c } => self.accumulate(grads, *a, g.scale(*c)),
            Op::AddScalar { a } => self.accumulate(grads, *a, g.clone()),
            Op::Unary { a, kind } => {
                let x = self.value(*a);
                let d: Tensor = match kind {
                    Unary::Neg => g.scale(-1.0),
                    Unary::Exp => g.zip_map(out, |g, y| g * y),
                    Unary::Log => g.zip_map(x, |g, x| g / x),
                    Unary::Sqrt => g.zip_map(out, |g, y| g * 0.5 / y),
                    Unary::Square => g.zip_map(x, |g, x| 2.0 * g * x),
                    Unary::Cosh => g.zip_map(x, |g, x| g * x.sinh()),
                    Unary::Sinh => g.zip_map(x, |g, x| g * x.cosh()),
                    Unary::Acosh => g.zip_map(x, |g, x| boundary_div(g, (x * x - 1.0).sqrt())),
                    Unary::Asin => g.zip_map(x, |g, x| boundary_div(g, (1.0 - x * x).sqrt())),
                    Unary::Acos => g.zip_map(x, |g, x| -boundary_div(g, (1.0 - x * x).sqrt())),
                    Unary::AcoshClamped => g.zip_map(x, |g, x| {
                        if x < 1.0 {
                            0.0
                        } else {
                            let x = x.max(ACOSH_GRAD_FLOOR);
                            g / (x * x - 1.0).sqrt()
                        }
                    }),
                    Unary::AcosClamped => g.zip_map(x, |g, x| {
                        if x.abs() > 1.0 {
                            0.0
                        } else {
                            let x = x.clamp(-ACOS_GRAD_CAP, ACOS_GRAD_CAP);
                            -g / (1.0 - x * x).sqrt()
                        }
                    }),
                    Unary::Gelu => g.zip_map(x, |g, x| g * gelu_grad(x)),
                    Unary::Sinhc => g.zip_map(x, |g, x| g * sinhc_grad(x)),
                };
                self.accumulate(grads, *a, d);
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.value(*a);
                let d = g.zip_map(x, |g, x| if x > *lo && x < *hi { g } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::SumAll { a } => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::SumRows { a } => {
                let (r, c) = self.value(*a).shape();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        d.set(i, j, g.get(i, 0));
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SumCols { a } => {
                let (r, c) = self.value(*a).shape();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        d.set(i, j, g.get(0, j));
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RowNorm { a } => {
                let x = self.value(*a);
                let (r, c) = x.shape();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    let n = out.get(i, 0);
                    if n > 0.0 {
                        for j in 0..c {
                            d.set(i, j, g.get(i, 0) * x.get(i, j) / n);
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (rows, d) = out.shape();
                let gv = self.value(*gain).data();
                if self.nodes[gain.0].requires_grad || self.nodes[bias.0].requires_grad {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            let gi = g.get(r, c);
                            dg[c] += gi * xhat[r * d + c];
                            db[c] += gi;
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::row(dg));
                    self.accumulate(grads, *bias, Tensor::row(db));
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = Tensor::zeros(rows, d);
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = g.get(r, c) * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for c in 0..d {
                            let dh = g.get(r, c) * gv[c];
                            dx.set(r, c, inv_std[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_h));
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::SoftmaxRows { a } => {
                let (rows, cols) = out.shape();
                let mut d = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let (y, gr) = (out.row_slice(r), g.row_slice(r));
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for c in 0..cols {
                        d.set(r, c, y[c] * (gr[c] - dot));
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmaxRows { a } => {
                let (rows, cols) = out.shape();
                let mut d = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let (y, gr) = (out.row_slice(r), g.row_slice(r));
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..cols {
                        d.set(r, c, gr[c] - y[c].exp() * gsum);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::GatherRows { a, idx } => {
                let (r, c) = self.value(*a).shape();
                let mut d = Tensor::zeros(r, c);
                for (o, &src) in idx.iter().enumerate() {
                    let dst = &mut d.data_mut()[src * c..(src + 1) * c];
                    for (x, y) in dst.iter_mut().zip(g.row_slice(o)) {
                        *x += y;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanPool { a, group } => {
                let (r, c) = self.value(*a).shape();
                let mut d = Tensor::zeros(r, c);
                let inv = 1.0 / *group as f64;
                for i in 0..r {
                    for j in 0..c {
                        d.set(i, j, g.get(i / group, j) * inv);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.value(*p).shape();
                    let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                    offset += r;
                    self.accumulate(grads, *p, Tensor::new(r, c, slice)?);
                }
            }
            Op::ConcatCols { parts } => {
                let rows = out.rows();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    let mut data = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        data.extend_from_slice(&g.row_slice(r)[offset..offset + c]);
                    }
                    offset += c;
                    self.accumulate(grads, *p, Tensor::new(rows, c, data)?);
                }
            }
            Op::SliceCols { a, start } => {
                let (r, c) = self.value(*a).shape();
                let len = out.cols();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    d.data_mut()[i * c + start..i * c + start + len].copy_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Transpose { a } => self.accumulate(grads, *a, g.transpose()),
            Op::Diag { a } => {
                let n = out.rows();
                let mut d = Tensor::zeros(n, n);
                for i in 0..n {
                    d.set(i, i, g.get(i, 0));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (rows, d) = out.shape();
                let t = spec.seq_len;
                let dh = d / spec.n_heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = Tensor::zeros(rows, d);
                let mut dk = Tensor::zeros(rows, d);
                let mut dv = Tensor::zeros(rows, d);
                let mut qh = vec![0.0; t * dh];
                let mut kh = vec![0.0; t * dh];
                let mut vh = vec![0.0; t * dh];
                let mut goh = vec![0.0; t * dh];
                let mut dp = vec![0.0; t * t];
                let mut tmp = vec![0.0; t * dh];
                for s in 0..spec.n_seq {
                    for h in 0..spec.n_heads {
                        copy_head(qv, s, h, t, d, dh, &mut qh);
                        copy_head(kv, s, h, t, d, dh, &mut kh);
                        copy_head(vv, s, h, t, d, dh, &mut vh);
                        copy_head(g.data(), s, h, t, d, dh, &mut goh);
                        let p = &probs[(s * spec.n_heads + h) * t * t..(s * spec.n_heads + h + 1) * t * t];
                        // dV = P^T dO
                        gemm(t, t, dh, 1.0, p, true, &goh, false, 0.0, &mut tmp);
                        paste_head(&tmp, s, h, t, d, dh, dv.data_mut());
                        // dP = dO V^T, then softmax backward into dS (in place)
                        gemm(t, dh, t, 1.0, &goh, false, &vh, true, 0.0, &mut dp);
                        for i in 0..t {
                            let row = &mut dp[i * t..(i + 1) * t];
                            let prow = &p[i * t..(i + 1) * t];
                            let dot: f64 = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                            for j in 0..t {
                                row[j] = prow[j] * (row[j] - dot);
                            }
                        }
                        // dQ = dS K * scale, dK = dS^T Q * scale
                        gemm(t, t, dh, scale, &dp, false, &kh, false, 0.0, &mut tmp);
                        paste_head(&tmp, s, h, t, d, dh, dq.data_mut());
                        gemm(t, t, dh, scale, &dp, true, &qh, false, 0.0, &mut tmp);
                        paste_head(&tmp, s, h, t, d, dh, dk.data_mut());
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
        }
        Ok(())
    }
}

fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (d, x) in dst.iter_mut().zip(src) {
        *d = (x - m).exp();
        s += *d;
    }
    for d in dst.iter_mut() {
        *d /= s;
    }
}

fn copy_head(src: &[f64], s: usize, h: usize, t: usize, d: usize, dh: usize, dst: &mut [f64]) {
    for i in 0..t {
        let base = (s * t + i) * d + h * dh;
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[base..base + dh]);
    }
}

fn paste_head(src: &[f64], s: usize, h: usize, t: usize, d: usize, dh: usize, dst: &mut [f64]) {
    for i in 0..t {
        let base = (s * t + i) * d + h * dh;
        dst[base..base + dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}
