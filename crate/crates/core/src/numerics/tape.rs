//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Every op evaluates eagerly and appends a node holding its value and
//! enough context for its vector-Jacobian product. Nodes whose inputs
//! cannot reach a differentiable leaf are stored as constants, so frozen
//! sub-graphs cost nothing in the backward pass.

use std::fmt;

use super::kernels;
use super::{Real, Tensor};
use crate::error::{ensure_shape, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused primitive defined outside this module.
///
/// `backward` receives the input values, the op's output and the incoming
/// gradient, and returns one gradient per input (`None` for inputs that
/// are not differentiable, e.g. integer-like controls).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor)
        -> Result<Vec<Option<Tensor>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Neg,
    Abs,
    Sqrt,
    Square,
    Sigmoid,
    Silu,
    Gelu,
    Softplus,
}

impl Unary {
    fn eval(self, x: Real) -> Real {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Neg => -x,
            Unary::Abs => x.abs(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Sigmoid => kernels::sigmoid(x),
            Unary::Silu => kernels::silu(x),
            Unary::Gelu => kernels::gelu(x),
            Unary::Softplus => kernels::softplus(x),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn grad(self, x: Real, y: Real) -> Real {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Neg => -1.0,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => kernels::silu_grad(x),
            Unary::Gelu => kernels::gelu_grad(x),
            Unary::Softplus => kernels::sigmoid(x),
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, Real),
    Offset(Var),
    MatMul(Var, Var),
    Unary(Var, Unary),
    LayerNorm { x: Var, gamma: Var, eps: Real },
    LayerNormAffine { x: Var, gamma: Var, beta: Var, eps: Real },
    Conv { x: Var, kernel: Var, bias: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, lse: Vec<Real> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { src: Var, start: usize },
    SliceCols { src: Var, start: usize },
    TileRows { src: Var, times: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumCols(Var),
    NormalizeRows(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one scalar root with respect to every differentiable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when the root does not
    /// depend on it.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

/// Single-owner record of evaluated operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

const NORMALIZE_EPS: Real = 1e-24;

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

    /// Differentiable input.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.push_raw(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    /// `x[S,D] + r[D]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let out = row_broadcast(self.value(x), self.value(r), |a, b| a + b)?;
        Ok(self.push(out, Op::AddRow(x, r), &[x, r]))
    }

    /// `x[S,D] ⊙ r[D]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let out = row_broadcast(self.value(x), self.value(r), |a, b| a * b)?;
        Ok(self.push(out, Op::MulRow(x, r), &[x, r]))
    }

    /// `x[S,D] ⊙ c[S,1]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let xv = self.value(x);
        let cv = self.value(c);
        let (s, d) = xv.dims2()?;
        ensure_shape!(cv.shape() == [s, 1], "mul_col expects [{s},1], got {:?}", cv.shape());
        let out = Tensor::from_fn(&[s, d], |i| xv.data()[i] * cv.data()[i / d]);
        Ok(self.push(out, Op::MulCol(x, c), &[x, c]))
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Var {
        let out = self.value(x).scale(c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// `x + c` for a constant scalar `c`.
    pub fn offset(&mut self, x: Var, c: Real) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::Offset(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Affine map `x·w + b` with `w[D_in, D_out]`, `b[D_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let out = self.value(x).map(|v| f.eval(v));
        self.push(out, Op::Unary(x, f), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }
    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Real) -> Result<Var> {
        let out = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            out,
            Op::LayerNormAffine {
                x,
                gamma,
                beta,
                eps,
            },
            &[x, gamma, beta],
        ))
    }

    /// Layer norm with a fixed zero shift; used when only the scale is learned.
    pub fn layer_norm_scale(&mut self, x: Var, gamma: Var, eps: Real) -> Result<Var> {
        let d = self.value(gamma).len();
        let out = kernels::layer_norm(self.value(x), self.value(gamma), &Tensor::zeros(&[d]), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, eps }, &[x, gamma]))
    }

    pub fn depthwise_conv1d_causal(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let out =
            kernels::depthwise_conv1d_causal(self.value(x), self.value(kernel), self.value(bias))?;
        Ok(self.push(out, Op::Conv { x, kernel, bias }, &[x, kernel, bias]))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (out, lse) =
            kernels::multi_head_attention(self.value(q), self.value(k), self.value(v), heads)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                lse,
            },
            &[q, k, v],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure_shape!(!parts.is_empty(), "concat of zero tensors");
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            ensure_shape!(r == rows, "concat_cols row mismatch: {r} vs {rows}");
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(src).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows { src, start }, &[src]))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let sv = self.value(src);
        let (rows, cols) = sv.dims2()?;
        ensure_shape!(
            start + len <= cols && len > 0,
            "column slice {start}..{} out of range for {cols} columns",
            start + len
        );
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&sv.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(out, Op::SliceCols { src, start }, &[src]))
    }

    /// Repeat the rows of `src` `times` times (block-wise).
    pub fn tile_rows(&mut self, src: Var, times: usize) -> Result<Var> {
        let sv = self.value(src);
        let (rows, cols) = sv.dims2()?;
        ensure_shape!(times >= 1, "tile count must be at least 1");
        let mut data = Vec::with_capacity(rows * cols * times);
        for _ in 0..times {
            data.extend_from_slice(sv.data());
        }
        let out = Tensor::new(vec![rows * times, cols], data)?;
        Ok(self.push(out, Op::TileRows { src, times }, &[src]))
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(src).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(src), &[src]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.len() as Real);
        self.push(out, Op::Mean(x), &[x])
    }

    /// Column means of `x[S,D]`, shape `[1,D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (s, d) = xv.dims2()?;
        let mut out = vec![0.0; d];
        for i in 0..s {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let out = Tensor::new(vec![1, d], out.into_iter().map(|v| v / s as Real).collect())?;
        Ok(self.push(out, Op::MeanRows(x), &[x]))
    }

    /// Row sums of `x[S,D]`, shape `[S,1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (s, _) = xv.dims2()?;
        let out = Tensor::new(vec![s, 1], (0..s).map(|i| xv.row(i).iter().sum()).collect())?;
        Ok(self.push(out, Op::SumCols(x), &[x]))
    }

    /// Scale every row of `x[S,k]` to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (s, k) = xv.dims2()?;
        let mut data = Vec::with_capacity(s * k);
        for i in 0..s {
            let r = xv.row(i);
            let n = (kernels::dot(r, r) + NORMALIZE_EPS).sqrt();
            data.extend(r.iter().map(|v| v / n));
        }
        let out = Tensor::new(vec![s, k], data)?;
        Ok(self.push(out, Op::NormalizeRows(x), &[x]))
    }

    /// Record an externally defined primitive whose output was computed by
    /// the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Gradients of the single-element `root` with respect to every
    /// differentiable leaf recorded before it.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        ensure_shape!(
            rv.len() == 1,
            "backward needs a scalar root, got shape {:?}",
            rv.shape()
        );
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::ones(rv.shape()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape());
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| self.value(v);
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y)?);
                }
                if rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y)?);
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x / y)?);
                }
                if rg(*b) {
                    let num = g.zip_map(val(*a), |x, y| x * y)?;
                    self.accumulate(grads, *b, num.zip_map(bv, |n, y| -n / (y * y))?);
                }
            }
            Op::AddRow(x, r) => {
                self.accumulate(grads, *x, g.clone());
                if rg(*r) {
                    self.accumulate(grads, *r, column_sums(g)?);
                }
            }
            Op::MulRow(x, r) => {
                let rv = val(*r);
                if rg(*x) {
                    self.accumulate(grads, *x, row_broadcast(g, rv, |a, b| a * b)?);
                }
                if rg(*r) {
                    let prod = g.zip_map(val(*x), |a, b| a * b)?;
                    self.accumulate(grads, *r, column_sums(&prod)?);
                }
            }
            Op::MulCol(x, c) => {
                let (s, d) = g.dims2()?;
                let cv = val(*c);
                if rg(*x) {
                    let gx = Tensor::from_fn(&[s, d], |i| g.data()[i] * cv.data()[i / d]);
                    self.accumulate(grads, *x, gx);
                }
                if rg(*c) {
                    let xv = val(*x);
                    let gc = Tensor::from_fn(&[s, 1], |i| kernels::dot(g.row(i), xv.row(i)));
                    self.accumulate(grads, *c, gc);
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scale(*c)),
            Op::Offset(x) => self.accumulate(grads, *x, g.clone()),
            Op::MatMul(a, b) => {
                if rg(*a) {
                    self.accumulate(grads, *a, kernels::matmul_nt(g, val(*b))?);
                }
                if rg(*b) {
                    self.accumulate(grads, *b, kernels::matmul_tn(val(*a), g)?);
                }
            }
            Op::Unary(x, f) => {
                let xv = val(*x);
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(y.data()))
                    .map(|(&gi, (&xi, &yi))| gi * f.grad(xi, yi))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::LayerNorm { x, gamma, eps } => {
                let (dx, dg, _) = kernels::layer_norm_backward(val(*x), val(*gamma), *eps, g)?;
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
            }
            Op::LayerNormAffine {
                x,
                gamma,
                beta,
                eps,
            } => {
                let (dx, dg, db) = kernels::layer_norm_backward(val(*x), val(*gamma), *eps, g)?;
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Conv { x, kernel, bias } => {
                let (dx, dk, db) =
                    kernels::depthwise_conv1d_causal_backward(val(*x), val(*kernel), g)?;
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *kernel, dk);
                self.accumulate(grads, *bias, db);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                lse,
            } => {
                let (dq, dk, dv) = kernels::multi_head_attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    &node.value,
                    lse,
                    *heads,
                    g,
                )?;
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (r, _) = val(p).dims2()?;
                    if r > 0 && rg(p) {
                        self.accumulate(grads, p, g.slice_rows(start, r)?);
                    }
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2()?;
                let mut start = 0;
                for &p in parts {
                    let (_, c) = val(p).dims2()?;
                    if rg(p) {
                        let mut data = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            data.extend_from_slice(&g.data()[i * total + start..i * total + start + c]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![rows, c], data)?);
                    }
                    start += c;
                }
            }
            Op::SliceRows { src, start } => {
                let sv = val(*src);
                let (_, cols) = sv.dims2()?;
                let mut full = Tensor::zeros(sv.shape());
                full.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *src, full);
            }
            Op::SliceCols { src, start } => {
                let sv = val(*src);
                let (rows, cols) = sv.dims2()?;
                let (_, len) = g.dims2()?;
                let mut full = Tensor::zeros(sv.shape());
                for i in 0..rows {
                    full.data_mut()[i * cols + start..i * cols + start + len]
                        .copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *src, full);
            }
            Op::TileRows { src, times } => {
                let sv = val(*src);
                let n = sv.len();
                let mut acc = Tensor::zeros(sv.shape());
                for t in 0..*times {
                    for (a, b) in acc.data_mut().iter_mut().zip(&g.data()[t * n..(t + 1) * n]) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *src, acc);
            }
            Op::Reshape(src) => {
                let shape = val(*src).shape().to_vec();
                self.accumulate(grads, *src, g.reshape(&shape)?);
            }
            Op::Sum(x) => {
                let g0 = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(val(*x).shape(), g0));
            }
            Op::Mean(x) => {
                let xv = val(*x);
                let g0 = g.data()[0] / xv.len() as Real;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g0));
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let (s, d) = xv.dims2()?;
                let inv = 1.0 / s as Real;
                let gx = Tensor::from_fn(&[s, d], |i| g.data()[i % d] * inv);
                self.accumulate(grads, *x, gx);
            }
            Op::SumCols(x) => {
                let (s, d) = val(*x).dims2()?;
                let gx = Tensor::from_fn(&[s, d], |i| g.data()[i / d]);
                self.accumulate(grads, *x, gx);
            }
            Op::NormalizeRows(x) => {
                let xv = val(*x);
                let y = &node.value;
                let (s, k) = xv.dims2()?;
                let mut data = Vec::with_capacity(s * k);
                for i in 0..s {
                    let r = xv.row(i);
                    let n = (kernels::dot(r, r) + NORMALIZE_EPS).sqrt();
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let yg = kernels::dot(yr, gr);
                    data.extend((0..k).map(|j| (gr[j] - yr[j] * yg) / n));
                }
                self.accumulate(grads, *x, Tensor::new(vec![s, k], data)?);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&ins, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Numerical(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.accumulate(grads, v, gi);
                    }
                }
            }
        }
        Ok(())
    }
}

fn row_broadcast(x: &Tensor, r: &Tensor, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
    let (s, d) = x.dims2()?;
    ensure_shape!(
        r.shape() == [d],
        "row broadcast expects [{d}], got {:?}",
        r.shape()
    );
    let rd = r.data();
    Ok(Tensor::from_fn(&[s, d], |i| f(x.data()[i], rd[i % d])))
}

fn column_sums(g: &Tensor) -> Result<Tensor> {
    let (s, d) = g.dims2()?;
    let mut out = vec![0.0; d];
    for i in 0..s {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    Tensor::new(vec![d], out)
}
