//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! constants (never differentiated) or parameters pulled from a
//! [`ParamStore`]; [`Tape::backward`] replays the record in reverse and
//! returns a [`Gradients`] table that can be folded back into the store.
//! Tapes are rebuilt for every forward pass.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension {
                op: "tensor",
                detail: format!("zero-sized dimension in shape {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                detail: format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    data.len()
                ),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(lo..hi)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension {
                op: "dims2",
                detail: format!("expected a 2-D tensor, got shape {other:?}"),
            }),
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[self.shape.len() - 1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Binary keep/drop mask over `[batch, seq_len]` positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    seq_len: usize,
    values: Vec<bool>,
}

impl AttentionMask {
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let seq_len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq_len) {
            return Err(Error::Dimension {
                op: "attention_mask",
                detail: "rows of differing length".into(),
            });
        }
        Ok(AttentionMask {
            seq_len,
            values: rows.concat(),
        })
    }

    pub fn batch(&self) -> usize {
        if self.seq_len == 0 {
            0
        } else {
            self.values.len() / self.seq_len
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.values[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn row_major_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
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

/// out[m×k] += g[m×n] · bᵀ where b is k×n.
fn matmul_grad_lhs(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// out[k×n] += aᵀ · g where a is m×k and g is m×n.
fn matmul_grad_rhs(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    /// Drops the recorded graph; cached parameter leaves go with it.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A detached leaf: it never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf that is not backed by a parameter store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls within one tape return the
    /// same node, so shared weights accumulate gradient from every use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape.clone(),
                right: self.value(b).shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        row_major_matmul(&self.value(a).data, &self.value(b).data, m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = &self.value(x).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.value(a).shape.clone(),
                right: self.value(b).shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape.clone(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `x[.., n] + bias[n]`, broadcasting the bias across leading dimensions.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.value(x).shape.last().unwrap_or(&0);
        if self.value(bias).shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: self.value(x).shape.clone(),
                right: self.value(bias).shape.clone(),
            });
        }
        let b = &self.value(bias).data;
        let data = self
            .value(x)
            .data
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let t = Tensor::new(self.value(x).shape.clone(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddRowBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape.clone(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data.iter_mut().for_each(|v| *v *= s);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(Error::Dimension {
                op: "mul_const",
                detail: format!(
                    "{} factors for {} values",
                    factors.len(),
                    self.value(x).len()
                ),
            });
        }
        let mut t = self.value(x).clone();
        t.data.iter_mut().zip(&factors).for_each(|(v, f)| *v *= f);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MulConst(x, factors), rg))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut t = self.value(x).clone();
        t.data.iter_mut().for_each(|v| *v = f(*v));
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(x, axis, None)
    }

    /// Softmax along `axis` with max subtraction. Positions whose `keep` flag
    /// is false get exactly zero weight; a slice with nothing kept is all
    /// zeros.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, keep: Option<&[bool]>) -> Result<Var> {
        let shape = self.value(x).shape.clone();
        if axis >= shape.len() {
            return Err(Error::Dimension {
                op: "softmax",
                detail: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let src = &self.value(x).data;
        if let Some(k) = keep {
            if k.len() != src.len() {
                return Err(Error::Dimension {
                    op: "softmax",
                    detail: format!("mask of {} entries for {} values", k.len(), src.len()),
                });
            }
        }
        let kept = |i: usize| keep.is_none_or(|k| k[i]);
        if (0..src.len()).any(|i| kept(i) && !src[i].is_finite()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let (outer, axis_len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * axis_len + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..axis_len {
                    if kept(idx(j)) {
                        max = max.max(src[idx(j)]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for j in 0..axis_len {
                    if kept(idx(j)) {
                        let e = (src[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        total += e;
                    }
                }
                for j in 0..axis_len {
                    out[idx(j)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
            rg,
        ))
    }

    /// Normalizes each row over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.value(x).shape.clone();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::Dimension {
                op: "layer_norm",
                detail: "normalized dimension is zero".into(),
            });
        }
        if self.value(gamma).shape != [d] || self.value(beta).shape != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: self.value(gamma).shape.clone(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let src = &self.value(x).data;
        let rows = src.len() / d;
        let mut normalized = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                normalized[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Concatenates 2-D tensors with equal row counts along the columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols needs at least one input"))?;
        let (rows, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(first).shape.clone(),
                    right: self.value(p).shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows needs at least one input"))?;
        let (_, cols) = self.value(first).dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(first).shape.clone(),
                    right: self.value(p).shape.clone(),
                });
            }
            rows += r;
            out.extend_from_slice(&self.value(p).data);
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if len == 0 || start + len > cols {
            return Err(Error::Dimension {
                op: "slice_cols",
                detail: format!("columns {start}..{} of {cols}", start + len),
            });
        }
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows, len], out)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Selects rows of a 2-D table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "row id {bad} out of range for table of {rows} rows"
            )));
        }
        let src = &self.value(table).data;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), cols], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Sliding windows over the time axis of `x[T, c]`: output frame `t` holds
    /// rows `t*stride .. t*stride + kernel` flattened, zero-padded past the end.
    /// Produces `ceil(T / stride)` frames.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (t_len, c) = self.value(x).dims2()?;
        if kernel == 0 || stride == 0 {
            return Err(Error::contract("im2col kernel and stride must be positive"));
        }
        let frames = t_len.div_ceil(stride);
        let src = &self.value(x).data;
        let mut out = vec![0.0; frames * kernel * c];
        for f in 0..frames {
            for k in 0..kernel {
                let t = f * stride + k;
                if t >= t_len {
                    break;
                }
                let dst = (f * kernel + k) * c;
                out[dst..dst + c].copy_from_slice(&src[t * c..(t + 1) * c]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![frames, kernel * c], out)?,
            Op::Im2Col { x, kernel, stride },
            rg,
        ))
    }

    /// `Σ_r w_r · −log softmax(logits_r)[target_r]` over the rows of `logits`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (rows, classes) = self.value(logits).dims2()?;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                detail: format!(
                    "{rows} rows, {} targets, {} weights",
                    targets.len(),
                    weights.len()
                ),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::contract(format!(
                "target {t} out of range for {classes} classes"
            )));
        }
        let src = &self.value(logits).data;
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "cross_entropy",
            });
        }
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - log_z).exp();
            }
            loss += weights[r] * (log_z - row[targets[r]]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut param_grads = Vec::new();
        let mut node_grads = HashMap::new();
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
            if let Some(pid) = node.param {
                param_grads.push((pid, g.clone()));
            }
            node_grads.insert(idx, g);
        }
        Ok(Gradients {
            nodes: node_grads,
            params: param_grads,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>], f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
                let n = val(*b).shape[1];
                acc(*a, grads, &mut |s| {
                    matmul_grad_lhs(g, &val(*b).data, m, k, n, s)
                });
                acc(*b, grads, &mut |s| {
                    matmul_grad_rhs(&val(*a).data, g, m, k, n, s)
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape[0], val(*x).shape[1]);
                acc(*x, grads, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    acc(*v, grads, &mut |s| {
                        s.iter_mut().zip(g).for_each(|(o, gv)| *o += gv)
                    });
                }
            }
            Op::AddRowBias(x, bias) => {
                acc(*x, grads, &mut |s| {
                    s.iter_mut().zip(g).for_each(|(o, gv)| *o += gv)
                });
                let n = val(*bias).len();
                acc(*bias, grads, &mut |s| {
                    for row in g.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(o, gv)| *o += gv);
                    }
                });
            }
            Op::Mul(a, b) => {
                acc(*a, grads, &mut |s| {
                    for ((o, gv), bv) in s.iter_mut().zip(g).zip(&val(*b).data) {
                        *o += gv * bv;
                    }
                });
                acc(*b, grads, &mut |s| {
                    for ((o, gv), av) in s.iter_mut().zip(g).zip(&val(*a).data) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(x, f) => {
                acc(*x, grads, &mut |s| {
                    s.iter_mut().zip(g).for_each(|(o, gv)| *o += gv * f)
                });
            }
            Op::MulConst(x, factors) => {
                acc(*x, grads, &mut |s| {
                    for ((o, gv), f) in s.iter_mut().zip(g).zip(factors) {
                        *o += gv * f;
                    }
                });
            }
            Op::Gelu(x) => {
                acc(*x, grads, &mut |s| {
                    for ((o, gv), xv) in s.iter_mut().zip(g).zip(&val(*x).data) {
                        *o += gv * gelu_grad(*xv);
                    }
                });
            }
            Op::Tanh(x) => {
                acc(*x, grads, &mut |s| {
                    for ((o, gv), y) in s.iter_mut().zip(g).zip(&node.value.data) {
                        *o += gv * (1.0 - y * y);
                    }
                });
            }
            Op::Sigmoid(x) => {
                acc(*x, grads, &mut |s| {
                    for ((o, gv), y) in s.iter_mut().zip(g).zip(&node.value.data) {
                        *o += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let y = &node.value.data;
                acc(*x, grads, &mut |s| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |j: usize| (o * axis_len + j) * inner + i;
                            let dot: f64 = (0..*axis_len).map(|j| y[idx(j)] * g[idx(j)]).sum();
                            for j in 0..*axis_len {
                                s[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let d = val(*gamma).len();
                let gam = &val(*gamma).data;
                acc(*x, grads, &mut |s| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &normalized[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            s[r * d + j] += is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
                acc(*gamma, grads, &mut |s| {
                    for (gr, xh) in g.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            s[j] += gr[j] * xh[j];
                        }
                    }
                });
                acc(*beta, grads, &mut |s| {
                    for gr in g.chunks(d) {
                        s.iter_mut().zip(gr).for_each(|(o, gv)| *o += gv);
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, grads, &mut |s| s.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).shape[1];
                    acc(*p, grads, &mut |s| {
                        for (r, row) in s.chunks_mut(w).enumerate() {
                            row.iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + w])
                                .for_each(|(o, gv)| *o += gv);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    acc(*p, grads, &mut |s| {
                        s.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(o, gv)| *o += gv)
                    });
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = val(*x).shape[1];
                let len = node.value.shape[1];
                acc(*x, grads, &mut |s| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        s[r * cols + start..r * cols + start + len]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(o, gv)| *o += gv);
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let cols = val(*table).shape[1];
                acc(*table, grads, &mut |s| {
                    for (r, &i) in ids.iter().enumerate() {
                        s[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(o, gv)| *o += gv);
                    }
                });
            }
            Op::Im2Col { x, kernel, stride } => {
                let (t_len, c) = (val(*x).shape[0], val(*x).shape[1]);
                let frames = node.value.shape[0];
                acc(*x, grads, &mut |s| {
                    for f in 0..frames {
                        for k in 0..*kernel {
                            let t = f * stride + k;
                            if t >= t_len {
                                break;
                            }
                            let src = (f * kernel + k) * c;
                            s[t * c..(t + 1) * c]
                                .iter_mut()
                                .zip(&g[src..src + c])
                                .for_each(|(o, gv)| *o += gv);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let classes = val(*logits).shape[1];
                acc(*logits, grads, &mut |s| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        for j in 0..classes {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            s[r * classes + j] += g[0] * w * (probs[r * classes + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

/// Result of [`Tape::backward`]: gradients for every differentiable node.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: HashMap<usize, Vec<f64>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is detached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(&v.0).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }
}

/// Central-difference estimate of the gradient of `f` at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let up = f(&probe);
        probe.data[i] = orig - step;
        let down = f(&probe);
        probe.data[i] = orig;
        out.data[i] = (up - down) / (2.0 * step);
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients from
/// turning finite-difference roundoff into spurious relative error.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                out.data[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn tensor_rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = t2(&[vec![3.0, -1.5], vec![0.25, 7.0]]);
        let bv = tape.constant(b.clone());
        let out = tape.matmul(i2, bv).unwrap();
        assert_eq!(tape.value(out), &b);

        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let out = tape.matmul(bv, z).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let out = tape.matmul(av, bv).unwrap();
        assert!(tape.value(out).max_abs_diff(&naive_matmul(&a, &b)) < 1e-14);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_closed_form_and_invariances() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-15);

        let c = tape.constant(Tensor::filled(&[4], 2.5));
        let y = tape.softmax(c, 0).unwrap();
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));

        let base = vec![0.3, -1.2, 4.0];
        let a = tape.constant(Tensor::new(vec![3], base.clone()).unwrap());
        let b =
            tape.constant(Tensor::new(vec![3], base.iter().map(|v| v + 100.0).collect()).unwrap());
        let (ya, yb) = (tape.softmax(a, 0).unwrap(), tape.softmax(b, 0).unwrap());
        assert!(tape.value(ya).max_abs_diff(tape.value(yb)) < 1e-12);

        let bad = tape.constant(Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap());
        assert!(matches!(tape.softmax(bad, 0), Err(Error::NonFinite { .. })));
        assert!(tape.softmax(a, 1).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[vec![0.0, 1.0], vec![3f64.ln(), 1.0]]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y);
        assert!((v.get2(0, 0) - 0.25).abs() < 1e-15);
        assert!((v.get2(1, 0) - 0.75).abs() < 1e-15);
        assert!((v.get2(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_zeroes_dropped_positions() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let keep = [true, false, true, false];
        let y = tape.masked_softmax(x, 1, Some(&keep)).unwrap();
        let v = tape.value(y).data().to_vec();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        let w = tape.constant(Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 3.0]).unwrap());
        let p = tape.mul(y, w).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        let gx = g.get(x).unwrap();
        assert_eq!(gx[1], 0.0);
        assert_eq!(gx[3], 0.0);

        let none = [false; 4];
        let z = tape.masked_softmax(x, 1, Some(&none)).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_edge_cases() {
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::filled(&[4], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(Tensor::filled(&[1, 4], 3.7));
        let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = tape.constant(Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng));
        let beta = tape.constant(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = tape.layer_norm(r, zeros, beta, 1e-5).unwrap();
        for row in 0..3 {
            assert_eq!(tape.value(y).row(row), &[0.1, 0.2, 0.3, 0.4]);
        }

        let bad_gamma = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.layer_norm(r, bad_gamma, beta, 1e-5).is_err());
    }

    #[test]
    fn layer_norm_matches_two_pass_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::uniform(&[2, 8], -1.0, 1.0, &mut rng);
        let gamma = Tensor::uniform(&[8], 0.5, 1.5, &mut rng);
        let beta = Tensor::uniform(&[8], -0.5, 0.5, &mut rng);
        let eps = 1e-5;
        let mut tape = Tape::new();
        let (xv, gv, bv) = (
            tape.constant(x.clone()),
            tape.constant(gamma.clone()),
            tape.constant(beta.clone()),
        );
        let y = tape.layer_norm(xv, gv, bv, eps).unwrap();
        for r in 0..2 {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for j in 0..8 {
                let expect =
                    gamma.data()[j] * (row[j] - mean) / (var + eps).sqrt() + beta.data()[j];
                assert!((tape.value(y).get2(r, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn detached_leaf_has_no_grad() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let p = tape.mul(x, c).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn finite_diff_basics() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-5);
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    /// Builds `loss(inputs)` on a fresh tape, then compares every input
    /// coordinate's analytic gradient against central differences.
    fn check_op(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |vals: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.variable(t.clone())).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).data()[0]
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        for (i, input) in inputs.iter().enumerate() {
            let numeric = finite_diff_grad(
                |probe| {
                    let mut vals = inputs.clone();
                    vals[i] = probe.clone();
                    eval(&vals)
                },
                input,
                1e-5,
            );
            let analytic = grads.get(vars[i]).unwrap();
            for (a, n) in analytic.iter().zip(numeric.data()) {
                assert!(
                    relative_error(*a, *n, 1e-3) < 1e-6,
                    "input {i}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn gradcheck_matmul_and_sum_of_product() {
        check_op(vec![rnd(&[3, 4], 1), rnd(&[4, 2], 2)], |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            t.sum(p)
        });
        // Weighted sum so the gradient is not constant.
        check_op(
            vec![rnd(&[3, 4], 1), rnd(&[4, 2], 2), rnd(&[3, 2], 3)],
            |t, v| {
                let p = t.matmul(v[0], v[1]).unwrap();
                let q = t.mul(p, v[2]).unwrap();
                t.sum(q)
            },
        );
    }

    #[test]
    fn gradcheck_elementwise_ops() {
        check_op(
            vec![rnd(&[2, 5], 4), rnd(&[5], 5), rnd(&[2, 5], 6)],
            |t, v| {
                let a = t.add_row_bias(v[0], v[1]).unwrap();
                let g = t.gelu(a);
                let th = t.tanh(g);
                let s = t.sigmoid(th);
                let sc = t.scale(s, 1.7);
                let m = t.mul(sc, v[2]).unwrap();
                let tr = t.transpose(m).unwrap();
                t.sum(tr)
            },
        );
    }

    #[test]
    fn gradcheck_softmax_both_axes() {
        for axis in 0..2 {
            check_op(vec![rnd(&[3, 4], 7), rnd(&[3, 4], 8)], move |t, v| {
                let s = t.softmax(v[0], axis).unwrap();
                let m = t.mul(s, v[1]).unwrap();
                t.sum(m)
            });
        }
    }

    #[test]
    fn gradcheck_layer_norm() {
        check_op(
            vec![
                rnd(&[2, 8], 9),
                rnd(&[8], 10),
                rnd(&[8], 11),
                rnd(&[2, 8], 12),
            ],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                let m = t.mul(y, v[3]).unwrap();
                t.sum(m)
            },
        );
    }

    #[test]
    fn gradcheck_structural_ops() {
        check_op(
            vec![rnd(&[2, 3], 13), rnd(&[2, 2], 14), rnd(&[5, 3], 15)],
            |t, v| {
                let c = t.concat_cols(&[v[0], v[1]]).unwrap();
                let s = t.slice_cols(c, 1, 3).unwrap();
                let g = t.gather_rows(v[2], &[4, 0, 4]).unwrap();
                let r = t.concat_rows(&[s, g]).unwrap();
                let sq = t.mul(r, r).unwrap();
                t.sum(sq)
            },
        );
        check_op(vec![rnd(&[7, 2], 16), rnd(&[4, 6], 17)], |t, v| {
            let f = t.im2col(v[0], 3, 2).unwrap();
            let m = t.mul(f, v[1]).unwrap();
            t.sum(m)
        });
    }

    #[test]
    fn gradcheck_weighted_cross_entropy() {
        check_op(vec![rnd(&[2, 6], 18)], |t, v| {
            t.weighted_cross_entropy(v[0], &[3, 0], &[0.7, 1.4])
                .unwrap()
        });
    }

    #[test]
    fn im2col_frame_count_and_padding() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![5, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let f = tape.im2col(x, 2, 2).unwrap();
        assert_eq!(tape.value(f).shape(), &[3, 2]);
        assert_eq!(tape.value(f).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 0.0]);
    }

    #[test]
    fn dropout_is_identity_at_zero_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::filled(&[4], 1.0));
        assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
