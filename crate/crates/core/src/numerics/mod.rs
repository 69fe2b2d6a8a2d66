//! Dense `f64` tensors, a reverse-mode differentiation tape and the handful of
//! primitives a small transformer needs.

pub mod finite_diff;
mod tape;
mod tensor;

pub use tape::{AttentionVars, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Added to the variance in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive score for blocked attention entries.
pub const MASK_FILL: f64 = -1e9;

/// Square boolean attention mask; `true` at `(i, j)` means query `i` may not
/// attend to key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    pub fn unmasked(size: usize) -> Self {
        Self {
            size,
            blocked: vec![false; size * size],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::Shape("attention mask must be square".into()));
        }
        Ok(Self {
            size,
            blocked: rows.concat(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn blocked(&self) -> &[bool] {
        &self.blocked
    }

    pub fn is_blocked(&self, query: usize, key: usize) -> bool {
        self.blocked[query * self.size + key]
    }

    pub fn set(&mut self, query: usize, key: usize, blocked: bool) {
        self.blocked[query * self.size + key] = blocked;
    }

    pub fn count_blocked(&self) -> usize {
        self.blocked.iter().filter(|&&b| b).count()
    }

    pub fn first_fully_blocked_row(&self) -> Option<usize> {
        (0..self.size).find(|&i| (0..self.size).all(|j| self.is_blocked(i, j)))
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite logit".into()));
    }
    Ok(tape::softmax_slice(logits))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "cosine similarity of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    // Rounding can push |cos| a hair past 1 for colinear inputs.
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Unit-norm copy of `a`.
pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateVector);
    }
    Ok(a.iter().map(|v| v / n).collect())
}

/// Multi-head attention on plain values; see [`Tape::attention`].
pub fn masked_attention(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: Option<&AttentionMask>,
    heads: usize,
) -> Result<Tensor> {
    if [queries, keys, values].iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument("non-finite attention input".into()));
    }
    let mut tape = Tape::new();
    let q = tape.constant(queries.clone());
    let k = tape.constant(keys.clone());
    let v = tape.constant(values.clone());
    let out = tape.attention(q, k, v, heads, mask)?;
    Ok(tape.value(out.output).clone())
}
