//! Reverse-mode automatic differentiation over an append-only operation record.
//!
//! Every operation appends a node holding its forward value, so node indices
//! are already a topological order. `backward` walks the record once in
//! reverse and accumulates vector-Jacobian products into the inputs.

use super::tensor::Tensor;
use super::{AttentionMask, LAYER_NORM_EPS, MASK_FILL};
use crate::error::{Error, Result};

/// Handle to a node in a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    QuickGelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Element(Var, usize),
    Sum(Var),
    MeanRows(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Output of [`Tape::attention`]: the concatenated head outputs and the
/// per-head attention weight matrices.
#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn get_values(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_ALPHA: f64 = 1.702;

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

fn accumulate_at(slot: &mut Option<Vec<f64>>, len: usize, offset: usize, delta: &[f64]) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    for (a, b) in g[offset..offset + delta.len()].iter_mut().zip(delta) {
        *a += b;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let o_row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * c..(p + 1) * c];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable input whose gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Whether gradient can flow from `to` back into `from`.
    pub fn depends_on(&self, to: Var, from: Var) -> bool {
        if to.0 < from.0 {
            return false;
        }
        let mut reach = vec![false; to.0 + 1];
        reach[to.0] = true;
        for i in (from.0..=to.0).rev() {
            if !reach[i] {
                continue;
            }
            if i == from.0 {
                return true;
            }
            for input in self.inputs(i) {
                if input.0 >= from.0 {
                    reach[input.0] = true;
                }
            }
        }
        false
    }

    fn inputs(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::QuickGelu(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Element(a, _)
            | Op::Sum(a)
            | Op::MeanRows(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::L2NormalizeRows { x, .. } => vec![*x],
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, "elementwise")?;
        let (r, c) = self.dims(a);
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(r, c, values)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a + row`, broadcasting a `1 x c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(Error::Shape(format!(
                "row broadcast: {:?} onto {:?}",
                self.dims(row),
                (r, c)
            )));
        }
        let bias = self.value(row).values().to_vec();
        let mut values = self.value(a).values().to_vec();
        for chunk in values.chunks_mut(c) {
            for (v, b) in chunk.iter_mut().zip(&bias) {
                *v += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::matrix(r, c, values)?, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// `x * sigmoid(1.702 x)`.
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * sigmoid(GELU_ALPHA * v));
        let rg = self.rg(&[a]);
        self.push(value, Op::QuickGelu(a), rg)
    }

    /// Row-wise layer normalization with `1 x c` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gamma) != (1, c) || self.dims(beta) != (1, c) {
            return Err(Error::Shape("layer norm affine parameters".into()));
        }
        let xv = self.value(x).values();
        let g = self.value(gamma).values();
        let b = self.value(beta).values();
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; r * c];
        for (src, dst) in self.value(a).values().chunks(c).zip(out.chunks_mut(c)) {
            softmax_into(src, dst);
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::matrix(r, c, out).expect("shape"),
            Op::SoftmaxRows(a),
            rg,
        )
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; r * c];
        for (src, dst) in self.value(a).values().chunks(c).zip(out.chunks_mut(c)) {
            log_softmax_into(src, dst);
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::matrix(r, c, out).expect("shape"),
            Op::LogSoftmaxRows(a),
            rg,
        )
    }

    /// Scalar view of entry `(row, col)`.
    pub fn element(&mut self, a: Var, row: usize, col: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if row >= r || col >= c {
            return Err(Error::OutOfRange {
                what: "element",
                index: row * c + col,
                size: r * c,
            });
        }
        let idx = row * c + col;
        let value = Tensor::scalar(self.value(a).values()[idx]);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Element(a, idx), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).values().iter().sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column-wise mean over rows: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; c];
        for row in self.value(a).values().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::matrix(1, c, out).expect("shape"),
            Op::MeanRows(a),
            rg,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > r {
            return Err(Error::Shape(format!(
                "rows {start}..{} of {r}",
                start + len
            )));
        }
        let values = self.value(a).values()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(len, c, values)?, Op::SliceRows(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let mut values = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::Shape("concat_rows column mismatch".into()));
            }
            rows += r;
            values.extend_from_slice(self.value(p).values());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(rows, c, values)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > c {
            return Err(Error::Shape(format!(
                "cols {start}..{} of {c}",
                start + len
            )));
        }
        let src = self.value(a).values();
        let mut values = Vec::with_capacity(r * len);
        for i in 0..r {
            values.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(r, len, values)?, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut values = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                values.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(r, total, values)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Scales every row to unit Euclidean norm. Zero rows are an error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut values = self.value(a).values().to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in values.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateVector);
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::matrix(r, c, values)?,
            Op::L2NormalizeRows { x: a, norms },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `mask.is_blocked(i, j)` forbids query `i` from reading key `j`. Blocked
    /// scores receive `MASK_FILL` before the softmax and the resulting weights
    /// are multiplied by zero afterwards.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<AttentionVars> {
        let (n, d) = self.dims(q);
        if self.dims(k) != (n, d) || self.dims(v) != (n, d) {
            return Err(Error::Shape("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let mask_terms = match mask {
            Some(m) => {
                if m.size() != n {
                    return Err(Error::Shape(format!(
                        "mask for {} tokens applied to {n}",
                        m.size()
                    )));
                }
                if let Some(row) = m.first_fully_blocked_row() {
                    return Err(Error::NoAttentionTargets(row));
                }
                let fill = Tensor::matrix(
                    n,
                    n,
                    m.blocked()
                        .iter()
                        .map(|&b| if b { MASK_FILL } else { 0.0 })
                        .collect(),
                )?;
                let keep = Tensor::matrix(
                    n,
                    n,
                    m.blocked()
                        .iter()
                        .map(|&b| if b { 0.0 } else { 1.0 })
                        .collect(),
                )?;
                Some((self.constant(fill), self.constant(keep)))
            }
            None => None,
        };
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
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
            let kt = self.transpose(kh);
            let raw = self.matmul(qh, kt)?;
            let mut scores = self.scale(raw, scale);
            if let Some((fill, _)) = mask_terms {
                scores = self.add(scores, fill)?;
            }
            let mut w = self.softmax_rows(scores);
            if let Some((_, keep)) = mask_terms {
                w = self.mul(w, keep)?;
            }
            weights.push(w);
            outs.push(self.matmul(w, vh)?);
        }
        let output = if heads == 1 {
            outs[0]
        } else {
            self.concat_cols(&outs)?
        };
        Ok(AttentionVars { output, weights })
    }

    /// Back-propagates from a scalar output through the whole record.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::NonScalarLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        // Only nodes that can carry gradient keep an entry.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (r, c) = node.value.dims();
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ar, k) = self.dims(*a);
                if needs(a) {
                    let bt = transpose_raw(self.value(*b).values(), k, c);
                    accumulate(&mut grads[a.0], &matmul_raw(g, &bt, ar, c, k));
                }
                if needs(b) {
                    let at = transpose_raw(self.value(*a).values(), ar, k);
                    accumulate(&mut grads[b.0], &matmul_raw(&at, g, k, ar, c));
                }
            }
            Op::Transpose(a) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], &transpose_raw(g, r, c));
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::AddRow(a, row) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if needs(row) {
                    let mut col = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        for (s, v) in col.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads[row.0], &col);
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if needs(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(*b).values())
                        .map(|(x, y)| x * y)
                        .collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if needs(b) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a).values())
                        .map(|(x, y)| x * y)
                        .collect();
                    accumulate(&mut grads[b.0], &d);
                }
            }
            Op::Scale(a, s) => {
                if needs(a) {
                    let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                    accumulate(&mut grads[a.0], &d);
                }
            }
            Op::QuickGelu(a) => {
                if needs(a) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a).values())
                        .map(|(gv, &x)| {
                            let s = sigmoid(GELU_ALPHA * x);
                            gv * (s + GELU_ALPHA * x * s * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads[a.0], &d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).values();
                if needs(gamma) {
                    let mut dg = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(&mut grads[gamma.0], &dg);
                }
                if needs(beta) {
                    let mut db = vec![0.0; c];
                    for gr in g.chunks(c) {
                        for (d, v) in db.iter_mut().zip(gr) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[beta.0], &db);
                }
                if needs(x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = inv_std[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(a) {
                    let y = node.value.values();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], &d);
                }
            }
            Op::LogSoftmaxRows(a) => {
                if needs(a) {
                    let y = node.value.values();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            d[i * c + j] = gr[j] - y[i * c + j].exp() * total;
                        }
                    }
                    accumulate(&mut grads[a.0], &d);
                }
            }
            Op::Element(a, idx) => {
                if needs(a) {
                    let len = self.value(*a).len();
                    accumulate_at(&mut grads[a.0], len, *idx, g);
                }
            }
            Op::Sum(a) => {
                if needs(a) {
                    let d = vec![g[0]; self.value(*a).len()];
                    accumulate(&mut grads[a.0], &d);
                }
            }
            Op::MeanRows(a) => {
                if needs(a) {
                    let (ar, _) = self.dims(*a);
                    let mut d = Vec::with_capacity(ar * c);
                    for _ in 0..ar {
                        d.extend(g.iter().map(|v| v / ar as f64));
                    }
                    accumulate(&mut grads[a.0], &d);
                }
            }
            Op::SliceRows(a, start) => {
                if needs(a) {
                    let len = self.value(*a).len();
                    accumulate_at(&mut grads[a.0], len, start * c, g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if needs(p) {
                        accumulate(&mut grads[p.0], &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                if needs(a) {
                    let (ar, ac) = self.dims(*a);
                    let slot = grads[a.0].get_or_insert_with(|| vec![0.0; ar * ac]);
                    for i in 0..r {
                        for j in 0..c {
                            slot[i * ac + start + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (_, pc) = self.dims(*p);
                    if needs(p) {
                        let mut d = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            d.extend_from_slice(&g[i * c + offset..i * c + offset + pc]);
                        }
                        accumulate(&mut grads[p.0], &d);
                    }
                    offset += pc;
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if needs(x) {
                    let y = node.value.values();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[i * c + j] = (gr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                    accumulate(&mut grads[x.0], &d);
                }
            }
        }
    }
}
