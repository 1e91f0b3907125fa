//! Tape-based reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a `1 × 1` node walks the tape in reverse and
//! produces gradients for every node that depends on a parameter leaf.
//! Operations work on rank-2 tensors; row vectors are `1 × n`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable parameter in a parameter store.
pub type ParamId = usize;

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Silu,
    /// `ELU(x) + 1`, the positive kernel map used by linear attention.
    EluPlusOne,
    /// Tanh approximation of GELU.
    Gelu,
}

impl Unary {
    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Unary::Relu => x.fmax(F::zero()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::EluPlusOne => {
                if x > F::zero() {
                    x + F::one()
                } else {
                    x.exp()
                }
            }
            Unary::Gelu => {
                let u = gelu_inner(x);
                F::lit(0.5) * x * (F::one() + u.tanh())
            }
        }
    }

    fn derivative<F: Scalar>(self, x: F, y: F) -> F {
        match self {
            Unary::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Unary::Sigmoid => y * (F::one() - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (F::one() + x * (F::one() - s))
            }
            Unary::EluPlusOne => {
                if x > F::zero() {
                    F::one()
                } else {
                    y
                }
            }
            Unary::Gelu => {
                let t = gelu_inner(x).tanh();
                let du = F::lit(GELU_C) * (F::one() + F::lit(3.0 * GELU_A) * x * x);
                F::lit(0.5) * (F::one() + t) + F::lit(0.5) * x * (F::one() - t * t) * du
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu_inner<F: Scalar>(x: F) -> F {
    F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x)
}

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// A user-defined differentiable operation with a single input.
pub trait CustomOp<F: Scalar> {
    fn forward(&self, input: &Tensor<F>) -> Result<Tensor<F>>;
    /// Returns dL/d(input) given dL/d(output).
    fn backward(&self, input: &Tensor<F>, output: &Tensor<F>, grad_out: &Tensor<F>)
        -> Tensor<F>;
}

enum Op<F: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, F),
    ScaleBy(Var, Var),
    AddConst(Var),
    Unary(Var, Unary),
    Transpose(Var),
    SumRows(Var),
    MeanRows(Var),
    SumCols(Var),
    MeanCols(Var),
    MaxCols(Var, Vec<usize>),
    SumAll(Var),
    RowNormalize(Var, F),
    RowNorm(Var),
    StandardizeRows(Var, Vec<F>),
    StandardizeCols(Var, Vec<F>),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Rope(Var, Vec<(F, F)>),
    DepthwiseConv(Var, Var),
    Custom(Var, Box<dyn CustomOp<F>>),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recording tape.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        let (r, c) = t.dims();
        let t = Tensor::matrix(r, c, t.into_data());
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf that is not tied to a parameter store.
    pub fn variable(&mut self, t: Tensor<F>) -> Var {
        let (r, c) = t.dims();
        let t = Tensor::matrix(r, c, t.into_data());
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId, value: &Tensor<F>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(value.clone());
        self.params.insert(id, v);
        v
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&k, &v)| (k, v))
    }

    fn binary_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "div")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Div(a, b), ng))
    }

    /// `a + 1 bᵀ`: adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(shape_err(format!("add_row: {:?} + {:?}", (m, n), self.dims(row))));
        }
        let r = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += r[i % n];
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(v, Op::AddRow(a, row), ng))
    }

    /// Scales each column `j` of `a` by `row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(shape_err(format!("mul_row: {:?} * {:?}", (m, n), self.dims(row))));
        }
        let r = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x *= r[i % n];
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(v, Op::MulRow(a, row), ng))
    }

    /// Scales each row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(col) != (m, 1) {
            return Err(shape_err(format!("mul_col: {:?} * {:?}", (m, n), self.dims(col))));
        }
        let c = self.value(col).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x *= c[i / n.max(1)];
        }
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(v, Op::MulCol(a, col), ng))
    }

    /// Divides each row `i` of `a` by `col[i]`.
    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(col) != (m, 1) {
            return Err(shape_err(format!("div_col: {:?} / {:?}", (m, n), self.dims(col))));
        }
        let c = self.value(col).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x /= c[i / n.max(1)];
        }
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(v, Op::DivCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// Multiplies `a` by the value of a `1 × 1` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            return Err(shape_err("scale_by expects a 1x1 scale"));
        }
        let k = self.scalar(s);
        let v = self.value(a).map(|x| x * k);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(v, Op::ScaleBy(a, s), ng))
    }

    pub fn add_const(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddConst(a), ng)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let v = self.value(a).map(|x| f.apply(x));
        let ng = self.ng(a);
        self.push(v, Op::Unary(a, f), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    /// Column sums, `m × n → 1 × n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = self.value(a);
        let mut out = vec![F::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::row_vector(out), Op::SumRows(a), ng)
    }

    /// Mean over rows (token pooling), `m × n → 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = self.value(a);
        let inv = F::one() / F::from_usize(m).unwrap();
        let mut out = vec![F::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        let ng = self.ng(a);
        self.push(Tensor::row_vector(out), Op::MeanRows(a), ng)
    }

    /// Row sums, `m × n → m × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (m, _) = self.dims(a);
        let x = self.value(a);
        let out: Vec<F> = (0..m).map(|i| x.row(i).iter().copied().sum::<F>()).collect();
        let ng = self.ng(a);
        self.push(Tensor::column_vector(out), Op::SumCols(a), ng)
    }

    /// Row means, `m × n → m × 1`.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = self.value(a);
        let inv = F::one() / F::from_usize(n).unwrap();
        let out: Vec<F> = (0..m).map(|i| x.row(i).iter().copied().sum::<F>() * inv).collect();
        let ng = self.ng(a);
        self.push(Tensor::column_vector(out), Op::MeanCols(a), ng)
    }

    /// Row maxima, `m × n → m × 1` (first index wins ties).
    pub fn max_cols(&mut self, a: Var) -> Var {
        let (m, _) = self.dims(a);
        let x = self.value(a);
        let mut arg = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = x.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            out.push(row[best]);
        }
        let ng = self.ng(a);
        self.push(Tensor::column_vector(out), Op::MaxCols(a, arg), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// `x / (‖x‖₂ + eps)` per row.
    pub fn row_normalize(&mut self, a: Var, eps: F) -> Var {
        let (m, n) = self.dims(a);
        let x = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = x.row(i);
            let nrm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            let s = nrm + eps;
            out.extend(row.iter().map(|&v| v / s));
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(m, n, out), Op::RowNormalize(a, eps), ng)
    }

    /// Euclidean norm per row, `m × n → m × 1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let (m, _) = self.dims(a);
        let x = self.value(a);
        let out: Vec<F> = (0..m)
            .map(|i| x.row(i).iter().map(|&v| v * v).sum::<F>().sqrt())
            .collect();
        let ng = self.ng(a);
        self.push(Tensor::column_vector(out), Op::RowNorm(a), ng)
    }

    /// Zero-mean, unit-variance per row (no affine).
    pub fn standardize_rows(&mut self, a: Var, eps: F) -> Var {
        let (m, n) = self.dims(a);
        let x = self.value(a);
        let nf = F::from_usize(n).unwrap();
        let mut out = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let inv = F::one() / (var + eps).sqrt();
            inv_std.push(inv);
            out.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(m, n, out), Op::StandardizeRows(a, inv_std), ng)
    }

    /// Zero-mean, unit-variance per column (batch statistics).
    /// Returns the node together with the column means and biased variances.
    pub fn standardize_cols(&mut self, a: Var, eps: F) -> (Var, Vec<F>, Vec<F>) {
        let (m, n) = self.dims(a);
        let x = self.value(a);
        let mf = F::from_usize(m).unwrap();
        let mut means = vec![F::zero(); n];
        let mut vars = vec![F::zero(); n];
        for i in 0..m {
            for (mu, &v) in means.iter_mut().zip(x.row(i)) {
                *mu += v;
            }
        }
        for mu in &mut means {
            *mu /= mf;
        }
        for i in 0..m {
            for (j, &v) in x.row(i).iter().enumerate() {
                vars[j] += (v - means[j]) * (v - means[j]);
            }
        }
        for s in &mut vars {
            *s /= mf;
        }
        let inv_std: Vec<F> = vars.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (j, &v) in x.row(i).iter().enumerate() {
                out.push((v - means[j]) * inv_std[j]);
            }
        }
        let ng = self.ng(a);
        let var = self.push(Tensor::matrix(m, n, out), Op::StandardizeCols(a, inv_std), ng);
        (var, means, vars)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(super::ops::softmax_unchecked(x.row(i)));
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(m, n, out), Op::SoftmaxRows(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_cols of nothing"));
        };
        let m = self.dims(first).0;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(shape_err("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(m, total, out), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows of nothing"));
        };
        let n = self.dims(first).1;
        if parts.iter().any(|&p| self.dims(p).1 != n) {
            return Err(shape_err("concat_rows: column counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(total * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(total, n, out), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > m {
            return Err(shape_err(format!("slice_rows {start}+{len} of {m}")));
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(len, n, out), Op::SliceRows(a, start), ng))
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if idx.iter().any(|&j| j >= n) {
            return Err(shape_err("gather_cols index out of range"));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(m * idx.len());
        for i in 0..m {
            let row = x.row(i);
            out.extend(idx.iter().map(|&j| row[j]));
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(m, idx.len(), out), Op::GatherCols(a, idx.to_vec()), ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if idx.iter().any(|&i| i >= m) {
            return Err(shape_err("gather_rows index out of range"));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(x.row(i));
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(idx.len(), n, out), Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Places row `i` of `a` at row `idx[i]` of a zero `total × n` matrix
    /// (duplicate targets accumulate).
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], total: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if idx.len() != m || idx.iter().any(|&i| i >= total) {
            return Err(shape_err("scatter_rows index mismatch"));
        }
        let x = self.value(a);
        let mut out = vec![F::zero(); total * n];
        for (src, &dst) in idx.iter().enumerate() {
            for (o, &v) in out[dst * n..(dst + 1) * n].iter_mut().zip(x.row(src)) {
                *o += v;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(total, n, out), Op::ScatterRows(a, idx.to_vec()), ng))
    }

    /// Rotates feature pairs `(2m, 2m+1)` of row `i` by `angles[i][m]`.
    /// `rot` holds `(cos, sin)` for every row and pair, row-major.
    pub fn rotate_pairs(&mut self, a: Var, rot: Vec<(F, F)>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if n % 2 != 0 || rot.len() != m * n / 2 {
            return Err(shape_err("rotate_pairs needs an even width and one rotation per pair"));
        }
        let x = self.value(a);
        let mut out = x.data().to_vec();
        for i in 0..m {
            for p in 0..n / 2 {
                let (c, s) = rot[i * n / 2 + p];
                let x0 = out[i * n + 2 * p];
                let x1 = out[i * n + 2 * p + 1];
                out[i * n + 2 * p] = x0 * c - x1 * s;
                out[i * n + 2 * p + 1] = x0 * s + x1 * c;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(m, n, out), Op::Rope(a, rot), ng))
    }

    /// Depthwise 1-D convolution along rows with zero "same" padding.
    /// `x` is `T × c`, `w` is `c × k` (k odd); output is `T × c` with
    /// `y[t, ch] = Σ_j w[ch, j] · x[t + j − k/2, ch]`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, c) = self.dims(x);
        let (wc, k) = self.dims(w);
        if wc != c || k % 2 == 0 {
            return Err(shape_err(format!(
                "depthwise_conv: input width {c}, kernel {wc}x{k} (kernel width must be odd)"
            )));
        }
        let half = k / 2;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![F::zero(); t * c];
        for ti in 0..t {
            for j in 0..k {
                let src = ti + j;
                if src < half || src - half >= t {
                    continue;
                }
                let src = src - half;
                for ch in 0..c {
                    out[ti * c + ch] += wv.get(ch, j) * xv.get(src, ch);
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(Tensor::matrix(t, c, out), Op::DepthwiseConv(x, w), ng))
    }

    pub fn custom(&mut self, a: Var, op: Box<dyn CustomOp<F>>) -> Result<Var> {
        let v = op.forward(self.value(a))?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Custom(a, op), ng))
    }

    /// `x W + b` for `x: m × k`, `W: k × n`, `b: 1 × n`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, out: Var) -> Result<Gradients<F>> {
        if self.dims(out) != (1, 1) {
            return Err(shape_err("backward expects a scalar output"));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(F::one()));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let bt = self.value(*b).transpose();
                    self.acc(grads, *a, g.matmul(&bt).expect("matmul grad"));
                }
                if self.ng(*b) {
                    let at = self.value(*a).transpose();
                    self.acc(grads, *b, at.matmul(g).expect("matmul grad"));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    self.acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(bv, |x, d| x / d));
                }
                if self.ng(*b) {
                    let av = self.value(*a);
                    let mut out = g.clone();
                    for (i, o) in out.data_mut().iter_mut().enumerate() {
                        let d = bv.data()[i];
                        *o = -*o * av.data()[i] / (d * d);
                    }
                    self.acc(grads, *b, out);
                }
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*r) {
                    self.acc(grads, *r, col_sums(g));
                }
            }
            Op::MulRow(a, r) => {
                let (_, n) = g.dims();
                if self.ng(*a) {
                    let rv = self.value(*r).data();
                    let mut out = g.clone();
                    for (i, o) in out.data_mut().iter_mut().enumerate() {
                        *o *= rv[i % n];
                    }
                    self.acc(grads, *a, out);
                }
                if self.ng(*r) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y);
                    self.acc(grads, *r, col_sums(&prod));
                }
            }
            Op::MulCol(a, c) => {
                let (_, n) = g.dims();
                if self.ng(*a) {
                    let cv = self.value(*c).data();
                    let mut out = g.clone();
                    for (i, o) in out.data_mut().iter_mut().enumerate() {
                        *o *= cv[i / n.max(1)];
                    }
                    self.acc(grads, *a, out);
                }
                if self.ng(*c) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y);
                    self.acc(grads, *c, row_sums(&prod));
                }
            }
            Op::DivCol(a, c) => {
                let (_, n) = g.dims();
                let cv = self.value(*c).data();
                if self.ng(*a) {
                    let mut out = g.clone();
                    for (i, o) in out.data_mut().iter_mut().enumerate() {
                        *o /= cv[i / n.max(1)];
                    }
                    self.acc(grads, *a, out);
                }
                if self.ng(*c) {
                    // d(a/c)/dc = -y/c
                    let mut prod = g.zip_map(y, |x, yy| x * yy);
                    for (i, o) in prod.data_mut().iter_mut().enumerate() {
                        *o = -*o / cv[i / n.max(1)];
                    }
                    self.acc(grads, *c, row_sums(&prod));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|x| x * s));
            }
            Op::ScaleBy(a, s) => {
                let k = self.scalar(*s);
                if self.ng(*a) {
                    self.acc(grads, *a, g.map(|x| x * k));
                }
                if self.ng(*s) {
                    let d = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&x, &y)| x * y)
                        .sum::<F>();
                    self.acc(grads, *s, Tensor::scalar(d));
                }
            }
            Op::AddConst(a) => self.acc(grads, *a, g.clone()),
            Op::Unary(a, f) => {
                let x = self.value(*a);
                let mut out = g.clone();
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o *= f.derivative(x.data()[i], y.data()[i]);
                }
                self.acc(grads, *a, out);
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::SumRows(a) | Op::MeanRows(a) => {
                let (m, n) = self.dims(*a);
                let scale = if matches!(node.op, Op::MeanRows(_)) {
                    F::one() / F::from_usize(m).unwrap()
                } else {
                    F::one()
                };
                let gd = g.data();
                let out: Vec<F> = (0..m * n).map(|i| gd[i % n] * scale).collect();
                self.acc(grads, *a, Tensor::matrix(m, n, out));
            }
            Op::SumCols(a) | Op::MeanCols(a) => {
                let (m, n) = self.dims(*a);
                let scale = if matches!(node.op, Op::MeanCols(_)) {
                    F::one() / F::from_usize(n).unwrap()
                } else {
                    F::one()
                };
                let gd = g.data();
                let out: Vec<F> = (0..m * n).map(|i| gd[i / n] * scale).collect();
                self.acc(grads, *a, Tensor::matrix(m, n, out));
            }
            Op::MaxCols(a, arg) => {
                let (m, n) = self.dims(*a);
                let mut out = Tensor::zeros(&[m, n]);
                for (i, &j) in arg.iter().enumerate() {
                    out.set(i, j, g.data()[i]);
                }
                self.acc(grads, *a, out);
            }
            Op::SumAll(a) => {
                let (m, n) = self.dims(*a);
                self.acc(grads, *a, Tensor::full(&[m, n], g.data()[0]));
            }
            Op::RowNormalize(a, eps) => {
                let x = self.value(*a);
                let (m, n) = x.dims();
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    let row = x.row(i);
                    let gr = g.row(i);
                    let nrm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
                    let s = nrm + *eps;
                    let gx: F = row.iter().zip(gr).map(|(&a, &b)| a * b).sum::<F>();
                    let coef = if nrm > F::zero() {
                        gx / (s * s * nrm)
                    } else {
                        F::zero()
                    };
                    out.extend(row.iter().zip(gr).map(|(&xv, &gv)| gv / s - xv * coef));
                }
                self.acc(grads, *a, Tensor::matrix(m, n, out));
            }
            Op::RowNorm(a) => {
                let x = self.value(*a);
                let (m, n) = x.dims();
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    let nrm = y.data()[i];
                    let gi = g.data()[i];
                    out.extend(x.row(i).iter().map(|&v| {
                        if nrm > F::zero() {
                            gi * v / nrm
                        } else {
                            F::zero()
                        }
                    }));
                }
                self.acc(grads, *a, Tensor::matrix(m, n, out));
            }
            Op::StandardizeRows(a, inv_std) => {
                let (m, n) = y.dims();
                let nf = F::from_usize(n).unwrap();
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let gm = gr.iter().copied().sum::<F>() / nf;
                    let gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>() / nf;
                    out.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(&gv, &yv)| inv_std[i] * (gv - gm - yv * gy)),
                    );
                }
                self.acc(grads, *a, Tensor::matrix(m, n, out));
            }
            Op::StandardizeCols(a, inv_std) => {
                let (m, n) = y.dims();
                let mf = F::from_usize(m).unwrap();
                let mut gm = vec![F::zero(); n];
                let mut gy = vec![F::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        gm[j] += g.get(i, j);
                        gy[j] += g.get(i, j) * y.get(i, j);
                    }
                }
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    for j in 0..n {
                        out.push(
                            inv_std[j] * (g.get(i, j) - gm[j] / mf - y.get(i, j) * gy[j] / mf),
                        );
                    }
                }
                self.acc(grads, *a, Tensor::matrix(m, n, out));
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = y.dims();
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<F>();
                    out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                self.acc(grads, *a, Tensor::matrix(m, n, out));
            }
            Op::ConcatCols(parts) => {
                let (m, total) = g.dims();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.ng(p) {
                        let mut out = Vec::with_capacity(m * w);
                        for i in 0..m {
                            out.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.acc(grads, p, Tensor::matrix(m, w, out));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let (_, n) = g.dims();
                let mut offset = 0;
                for &p in parts {
                    let h = self.dims(p).0;
                    if self.ng(p) {
                        let out = g.data()[offset * n..(offset + h) * n].to_vec();
                        self.acc(grads, p, Tensor::matrix(h, n, out));
                    }
                    offset += h;
                }
            }
            Op::SliceRows(a, start) => {
                let (m, n) = self.dims(*a);
                let mut out = Tensor::zeros(&[m, n]);
                let len = g.rows();
                out.data_mut()[start * n..(start + len) * n].copy_from_slice(g.data());
                self.acc(grads, *a, out);
            }
            Op::GatherCols(a, idx) => {
                let (m, n) = self.dims(*a);
                let mut out = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    for (k, &j) in idx.iter().enumerate() {
                        let v = out.get(i, j) + g.get(i, k);
                        out.set(i, j, v);
                    }
                }
                self.acc(grads, *a, out);
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = self.dims(*a);
                let mut out = vec![F::zero(); m * n];
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.acc(grads, *a, Tensor::matrix(m, n, out));
            }
            Op::ScatterRows(a, idx) => {
                let n = g.cols();
                let mut out = Vec::with_capacity(idx.len() * n);
                for &dst in idx {
                    out.extend_from_slice(g.row(dst));
                }
                self.acc(grads, *a, Tensor::matrix(idx.len(), n, out));
            }
            Op::Rope(a, rot) => {
                let (m, n) = g.dims();
                let mut out = g.data().to_vec();
                for i in 0..m {
                    for p in 0..n / 2 {
                        let (c, s) = rot[i * n / 2 + p];
                        let g0 = out[i * n + 2 * p];
                        let g1 = out[i * n + 2 * p + 1];
                        out[i * n + 2 * p] = g0 * c + g1 * s;
                        out[i * n + 2 * p + 1] = -g0 * s + g1 * c;
                    }
                }
                self.acc(grads, *a, Tensor::matrix(m, n, out));
            }
            Op::DepthwiseConv(x, w) => {
                let (t, c) = self.dims(*x);
                let (_, k) = self.dims(*w);
                let half = k / 2;
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut gx = vec![F::zero(); t * c];
                let mut gw = vec![F::zero(); c * k];
                for ti in 0..t {
                    for j in 0..k {
                        let src = ti + j;
                        if src < half || src - half >= t {
                            continue;
                        }
                        let src = src - half;
                        for ch in 0..c {
                            let gv = g.get(ti, ch);
                            gx[src * c + ch] += gv * wv.get(ch, j);
                            gw[ch * k + j] += gv * xv.get(src, ch);
                        }
                    }
                }
                self.acc(grads, *x, Tensor::matrix(t, c, gx));
                self.acc(grads, *w, Tensor::matrix(c, k, gw));
            }
            Op::Custom(a, op) => {
                let out = op.backward(self.value(*a), y, g);
                self.acc(grads, *a, out);
            }
        }
    }
}

fn col_sums<F: Scalar>(g: &Tensor<F>) -> Tensor<F> {
    let (m, n) = g.dims();
    let mut out = vec![F::zero(); n];
    for i in 0..m {
        for (o, &v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    Tensor::row_vector(out)
}

fn row_sums<F: Scalar>(g: &Tensor<F>) -> Tensor<F> {
    let (m, _) = g.dims();
    Tensor::column_vector((0..m).map(|i| g.row(i).iter().copied().sum::<F>()).collect())
}

/// Result of a reverse sweep.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
