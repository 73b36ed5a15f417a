use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExpRows(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    Rows(Var, usize),
    ConcatRows(Vec<Var>),
    Cols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Select(Var, Vec<usize>),
    Reshape(Var),
    Map(Var, fn(f64) -> f64),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Reverse-mode differentiation record.
///
/// Every operation appends one node holding its output value; nodes are
/// therefore in topological order and `backward` walks them once in
/// reverse. Leaves created with [`Tape::constant`] are not tracked, and
/// operations whose inputs are all untracked are skipped during backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<Option<Var>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a bound parameter; a zero tensor of the right shape is
    /// not synthesized, `None` means the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.get(v))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn need_matrix(op: &'static str, a: &Tensor) -> Result<(usize, usize)> {
    if a.rank() != 2 {
        return Err(Error::shape(op, format!("expected matrix, got {:?}", a.shape())));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

impl Tape {
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        Ok(self.push(Tensor::from_parts(shape, data), op, tracked))
    }

    /// A differentiable leaf (input or parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers every parameter of `store` as a leaf.
    pub fn bind(&mut self, store: &ParamStore) {
        self.params = store
            .tensors()
            .map(|t| Some(self.leaf(t.clone())))
            .collect();
    }

    /// Leaf holding a bound parameter. Panics if `bind` was not called with
    /// the store `id` came from.
    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.index()].expect("parameter store not bound to tape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = need_matrix("matmul", self.value(a))?;
        let (k2, n) = need_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.emit("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = need_matrix("matmul_nt", self.value(a))?;
        let (n, k2) = need_matrix("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let out = matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.emit("matmul_nt", vec![m, n], out, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        need_matrix("transpose", self.value(a))?;
        let t = self.value(a).transpose();
        let shape = t.shape().to_vec();
        self.emit("transpose", shape, t.into_data(), Op::Transpose(a), &[a])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.emit(name, shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Adds a `[1, C]` (or `[C]`) row to every row of an `[R, C]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = need_matrix("add_row", self.value(a))?;
        if self.value(row).numel() != c {
            return Err(Error::shape(
                "add_row",
                format!("{r}x{c} + row of {}", self.value(row).numel()),
            ));
        }
        let rv = self.value(row).data();
        let out = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|ch| ch.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        self.emit("add_row", vec![r, c], out, Op::AddRow(a, row), &[a, row])
    }

    /// Scales row `i` of an `[R, C]` matrix by `col[i]` (`col` is `[R, 1]` or `[R]`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = need_matrix("mul_col", self.value(a))?;
        if self.value(col).numel() != r {
            return Err(Error::shape(
                "mul_col",
                format!("{r}x{c} scaled by {} values", self.value(col).numel()),
            ));
        }
        let cv = self.value(col).data();
        let out = self
            .value(a)
            .data()
            .chunks(c)
            .zip(cv)
            .flat_map(|(ch, &s)| ch.iter().map(move |x| x * s))
            .collect();
        self.emit("mul_col", vec![r, c], out, Op::MulCol(a, col), &[a, col])
    }

    /// Multiplies every element by a one-element variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let out = self.value(a).data().iter().map(|x| x * sv).collect();
        let shape = self.value(a).shape().to_vec();
        self.emit("mul_scalar", shape, out, Op::MulScalar(a, s), &[a, s])
    }

    /// Divides every element by a one-element variable.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let out = self.value(a).data().iter().map(|x| x / sv).collect();
        let shape = self.value(a).shape().to_vec();
        self.emit("div_scalar", shape, out, Op::DivScalar(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        self.emit("scale", shape, out, Op::Scale(a, c), &[a])
    }

    /// `a + c` elementwise for a constant `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x + c).collect();
        let shape = self.value(a).shape().to_vec();
        self.emit("shift", shape, out, Op::Shift(a), &[a])
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.emit(name, shape, out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), libm::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("ln", a, Op::Ln(a), libm::log)
    }

    /// `ln(1 + eˣ)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, Op::Softplus(a), softplus)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn map(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Result<Var> {
        self.unary("map", a, Op::Map(a, df), f)
    }

    /// Row-wise softmax. Entries where `mask` (same shape, row-major) is
    /// `false` get probability zero; a fully masked row becomes all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = need_matrix("softmax_rows", self.value(a))?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::shape("softmax_rows", "mask size"));
            }
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..c {
                if keep(j) {
                    mx = mx.max(x[i * c + j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..c {
                if keep(j) {
                    let e = libm::exp(x[i * c + j] - mx);
                    out[i * c + j] = e;
                    z += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        self.emit("softmax_rows", vec![r, c], out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = need_matrix("log_softmax_rows", self.value(a))?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let lse = logsumexp(row.iter().copied());
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        self.emit("log_softmax_rows", vec![r, c], out, Op::LogSoftmax(a), &[a])
    }

    /// `[R, 1]` log-sum-exp of each row over the entries kept by `mask`.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = need_matrix("logsumexp_rows", self.value(a))?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r];
        let mut weights = vec![0.0; r * c];
        for i in 0..r {
            let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let lse = logsumexp((0..c).filter(|&j| keep(j)).map(|j| x[i * c + j]));
            if !lse.is_finite() {
                return Err(Error::Empty("logsumexp_rows"));
            }
            out[i] = lse;
            for j in 0..c {
                if keep(j) {
                    weights[i * c + j] = libm::exp(x[i * c + j] - lse);
                }
            }
        }
        self.emit("logsumexp_rows", vec![r, 1], out, Op::LogSumExpRows(a, weights), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.emit("sum", Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Empty("mean"));
        }
        let s: f64 = self.value(a).data().iter().sum();
        self.emit("mean", Vec::new(), vec![s / n as f64], Op::Mean(a), &[a])
    }

    /// `[1, C]` column sums of an `[R, C]` matrix.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = need_matrix("sum_rows", self.value(a))?;
        let x = self.value(a).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += x[i * c + j];
            }
        }
        self.emit("sum_rows", vec![1, c], out, Op::SumRows(a), &[a])
    }

    /// `[R, 1]` row sums of an `[R, C]` matrix.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (r, c) = need_matrix("sum_cols", self.value(a))?;
        let out = self.value(a).data().chunks(c.max(1)).take(r).map(|ch| ch.iter().sum()).collect();
        self.emit("sum_cols", vec![r, 1], out, Op::SumCols(a), &[a])
    }

    /// Rows `start..start + len`.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = need_matrix("rows", self.value(a))?;
        if start + len > r {
            return Err(Error::shape("rows", format!("{start}+{len} > {r}")));
        }
        let out = self.value(a).data()[start * c..(start + len) * c].to_vec();
        self.emit("rows", vec![len, c], out, Op::Rows(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let (_, c) = need_matrix("concat_rows", self.value(first))?;
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            let (pr, pc) = need_matrix("concat_rows", self.value(p))?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("{pc} vs {c} columns")));
            }
            out.extend_from_slice(self.value(p).data());
            r += pr;
        }
        self.emit("concat_rows", vec![r, c], out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = need_matrix("cols", self.value(a))?;
        if start + len > c {
            return Err(Error::shape("cols", format!("{start}+{len} > {c}")));
        }
        let x = self.value(a).data();
        let out = (0..r)
            .flat_map(|i| x[i * c + start..i * c + start + len].iter().copied())
            .collect();
        self.emit("cols", vec![r, len], out, Op::Cols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let (r, _) = need_matrix("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = need_matrix("concat_cols", self.value(p))?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("{pr} vs {r} rows")));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.emit("concat_cols", vec![r, c], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Output row `i` is input row `index[i]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = need_matrix("gather_rows", self.value(a))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        self.emit("gather_rows", vec![index.len(), c], out, Op::GatherRows(a, index.to_vec()), &[a])
    }

    /// `[n, 1]` column of the elements at the given flat (row-major) offsets.
    pub fn select(&mut self, a: Var, flat: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        if let Some(&bad) = flat.iter().find(|&&i| i >= n) {
            return Err(Error::shape("select", format!("offset {bad} of {n}")));
        }
        let x = self.value(a).data();
        let out = flat.iter().map(|&i| x[i]).collect();
        self.emit("select", vec![flat.len(), 1], out, Op::Select(a, flat.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        self.emit("reshape", shape.to_vec(), t.into_data(), Op::Reshape(a), &[a])
    }

    /// Computes gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::NotScalar { numel });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[idx].value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = shp(b)[1];
                self.accumulate(grads, a, matmul_nt_raw(g, val(b), m, n, k));
                self.accumulate(grads, b, matmul_tn_raw(val(a), g, m, k, n));
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = shp(b)[0];
                self.accumulate(grads, a, matmul_raw(g, val(b), m, n, k));
                self.accumulate(grads, b, matmul_tn_raw(g, val(a), m, n, k));
            }
            &Op::Transpose(a) => {
                let (r, c) = (shp(a)[0], shp(a)[1]);
                let gt = Tensor::from_parts(vec![c, r], g.to_vec()).transpose();
                self.accumulate(grads, a, gt.into_data());
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|x| -x).collect());
            }
            &Op::Mul(a, b) => {
                let (x, y) = (val(a), val(b));
                self.accumulate(grads, a, g.iter().zip(y).map(|(g, y)| g * y).collect());
                self.accumulate(grads, b, g.iter().zip(x).map(|(g, x)| g * x).collect());
            }
            &Op::Div(a, b) => {
                let y = val(b);
                self.accumulate(grads, a, g.iter().zip(y).map(|(g, y)| g / y).collect());
                let gb = g
                    .iter()
                    .zip(out)
                    .zip(y)
                    .map(|((g, o), y)| -g * o / y)
                    .collect();
                self.accumulate(grads, b, gb);
            }
            &Op::AddRow(a, row) => {
                let c = shp(a)[1];
                self.accumulate(grads, a, g.to_vec());
                let mut gr = vec![0.0; c];
                for ch in g.chunks(c) {
                    gr.iter_mut().zip(ch).for_each(|(s, x)| *s += x);
                }
                self.accumulate(grads, row, gr);
            }
            &Op::MulCol(a, col) => {
                let c = shp(a)[1];
                let s = val(col);
                let ga = g
                    .chunks(c)
                    .zip(s)
                    .flat_map(|(ch, &s)| ch.iter().map(move |x| x * s))
                    .collect();
                self.accumulate(grads, a, ga);
                let gc = g
                    .chunks(c)
                    .zip(val(a).chunks(c))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(g, x)| g * x).sum())
                    .collect();
                self.accumulate(grads, col, gc);
            }
            &Op::MulScalar(a, s) => {
                let sv = val(s)[0];
                self.accumulate(grads, a, g.iter().map(|x| x * sv).collect());
                let gs = g.iter().zip(val(a)).map(|(g, x)| g * x).sum();
                self.accumulate(grads, s, vec![gs]);
            }
            &Op::DivScalar(a, s) => {
                let sv = val(s)[0];
                self.accumulate(grads, a, g.iter().map(|x| x / sv).collect());
                let gs = -g.iter().zip(out).map(|(g, o)| g * o).sum::<f64>() / sv;
                self.accumulate(grads, s, vec![gs]);
            }
            &Op::Scale(a, c) => self.accumulate(grads, a, g.iter().map(|x| x * c).collect()),
            &Op::Shift(a) | &Op::Reshape(a) => self.accumulate(grads, a, g.to_vec()),
            &Op::Relu(a) => {
                let x = val(a);
                let ga = g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, a, ga);
            }
            &Op::Sigmoid(a) => {
                let ga = g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, a, ga);
            }
            &Op::Exp(a) => {
                let ga = g.iter().zip(out).map(|(g, y)| g * y).collect();
                self.accumulate(grads, a, ga);
            }
            &Op::Ln(a) => {
                let ga = g.iter().zip(val(a)).map(|(g, x)| g / x).collect();
                self.accumulate(grads, a, ga);
            }
            &Op::Softplus(a) => {
                let ga = g.iter().zip(val(a)).map(|(g, &x)| g * sigmoid(x)).collect();
                self.accumulate(grads, a, ga);
            }
            &Op::Clamp(a, lo, hi) => {
                let ga = g
                    .iter()
                    .zip(val(a))
                    .map(|(g, &x)| if x >= lo && x <= hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, a, ga);
            }
            &Op::Map(a, df) => {
                let ga = g.iter().zip(val(a)).map(|(g, &x)| g * df(x)).collect();
                self.accumulate(grads, a, ga);
            }
            &Op::Softmax(a) => {
                let c = shp(a)[1];
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), out_r) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        out_r[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, a, ga);
            }
            &Op::LogSoftmax(a) => {
                let c = shp(a)[1];
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), out_r) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        out_r[j] = gr[j] - libm::exp(yr[j]) * total;
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::LogSumExpRows(a, w) => {
                let c = shp(*a)[1];
                let ga = w
                    .chunks(c)
                    .zip(g)
                    .flat_map(|(wr, &gr)| wr.iter().map(move |w| w * gr))
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            &Op::Sum(a) => {
                let n = shp(a).iter().product();
                self.accumulate(grads, a, vec![g[0]; n]);
            }
            &Op::Mean(a) => {
                let n: usize = shp(a).iter().product();
                self.accumulate(grads, a, vec![g[0] / n as f64; n]);
            }
            &Op::SumRows(a) => {
                let (r, _) = (shp(a)[0], shp(a)[1]);
                let ga = (0..r).flat_map(|_| g.iter().copied()).collect();
                self.accumulate(grads, a, ga);
            }
            &Op::SumCols(a) => {
                let c = shp(a)[1];
                let ga = g.iter().flat_map(|&x| core::iter::repeat_n(x, c)).collect();
                self.accumulate(grads, a, ga);
            }
            &Op::Rows(a, start) => {
                let (r, c) = (shp(a)[0], shp(a)[1]);
                let mut ga = vec![0.0; r * c];
                ga[start * c..start * c + g.len()].copy_from_slice(g);
                self.accumulate(grads, a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    self.accumulate(grads, p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            &Op::Cols(a, start) => {
                let (r, c) = (shp(a)[0], shp(a)[1]);
                let len = g.len() / r.max(1);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, a, ga);
            }
            Op::ConcatCols(parts) => {
                let r = shp(parts[0])[0];
                let total = g.len() / r.max(1);
                let mut off = 0;
                for &p in parts {
                    let w = shp(p)[1];
                    let gp = (0..r)
                        .flat_map(|i| g[i * total + off..i * total + off + w].iter().copied())
                        .collect();
                    self.accumulate(grads, p, gp);
                    off += w;
                }
            }
            Op::GatherRows(a, index) => {
                let (r, c) = (shp(*a)[0], shp(*a)[1]);
                let mut ga = vec![0.0; r * c];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += g[k * c + j];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Select(a, flat) => {
                let mut ga = vec![0.0; self.nodes[a.0].value.numel()];
                for (k, &i) in flat.iter().enumerate() {
                    ga[i] += g[k];
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + libm::log(xs.map(|x| libm::exp(x - mx)).sum::<f64>())
}
