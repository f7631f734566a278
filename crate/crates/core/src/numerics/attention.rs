//! Blocked multi-head attention restricted to contiguous row groups.
//!
//! Rows of `q`, `k`, `v` are split into groups of `group_len` consecutive
//! rows; a query only sees keys of its own group. One group per multiset
//! gives the set-wise pattern, one group per sequence gives dense attention.
//! Probabilities are never materialised for the whole group: the forward
//! pass keeps a per-row log-sum-exp and backward recomputes score blocks.

use crate::error::{dim_err, NestError, Result};
use crate::numerics::scalar::{gemm, lit, Layout, Scalar};

const QUERY_BLOCK: usize = 64;

/// Grouping and masking of one attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub n_heads: usize,
    pub group_len: usize,
    /// Whether each row may be attended to as a key.
    pub key_valid: Vec<bool>,
    /// Inactive groups produce zero output and receive no gradient.
    pub group_active: Vec<bool>,
}

impl AttentionSpec {
    /// Single dense group over `rows` rows with every key valid.
    pub fn dense(n_heads: usize, rows: usize) -> Self {
        AttentionSpec {
            n_heads,
            group_len: rows,
            key_valid: vec![true; rows],
            group_active: vec![true],
        }
    }

    pub(crate) fn validate(&self, rows: usize, width: usize) -> Result<()> {
        if self.n_heads == 0 || !width.is_multiple_of(self.n_heads) {
            return dim_err(format!("width {width} is not divisible into {} heads", self.n_heads));
        }
        if self.group_len == 0 || !rows.is_multiple_of(self.group_len) {
            return dim_err(format!("{rows} rows do not split into groups of {}", self.group_len));
        }
        if self.key_valid.len() != rows {
            return dim_err("key mask length differs from row count");
        }
        if self.group_active.len() != rows / self.group_len {
            return dim_err("group activity flags differ from group count");
        }
        for (g, &active) in self.group_active.iter().enumerate() {
            let start = g * self.group_len;
            if active && !self.key_valid[start..start + self.group_len].iter().any(|&v| v) {
                return Err(NestError::DegenerateRow { row: start });
            }
        }
        Ok(())
    }
}

struct Geometry {
    width: usize,
    heads: usize,
    dk: usize,
    group: usize,
}

impl Geometry {
    fn new(rows: usize, width: usize, spec: &AttentionSpec) -> Self {
        let _ = rows;
        Geometry {
            width,
            heads: spec.n_heads,
            dk: width / spec.n_heads,
            group: spec.group_len,
        }
    }

    fn head_rows(&self, first_row: usize, head: usize) -> Layout {
        Layout { offset: first_row * self.width + head * self.dk, rs: self.width, cs: 1 }
    }

    fn head_rows_t(&self, first_row: usize, head: usize) -> Layout {
        Layout { offset: first_row * self.width + head * self.dk, rs: 1, cs: self.width }
    }
}

/// Scaled scores of one query block into `scores` (`b × group`), masked keys at -inf.
#[allow(clippy::too_many_arguments)]
fn score_block<T: Scalar>(
    geo: &Geometry,
    q: &[T],
    k: &[T],
    key_valid: &[bool],
    g0: usize,
    q0: usize,
    b: usize,
    head: usize,
    scale: T,
    scores: &mut [T],
) {
    gemm(
        b,
        geo.dk,
        geo.group,
        scale,
        q,
        geo.head_rows(q0, head),
        k,
        geo.head_rows_t(g0, head),
        T::zero(),
        scores,
        Layout::row_major(0, geo.group),
    );
    for i in 0..b {
        let row = &mut scores[i * geo.group..(i + 1) * geo.group];
        for (j, s) in row.iter_mut().enumerate() {
            if !key_valid[g0 + j] {
                *s = T::neg_infinity();
            }
        }
    }
}

/// Returns the attention output and per-row, per-head log-sum-exp.
pub(crate) fn forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    rows: usize,
    width: usize,
    spec: &AttentionSpec,
) -> (Vec<T>, Vec<T>) {
    let geo = Geometry::new(rows, width, spec);
    let scale = T::one() / lit::<T>(geo.dk as f64).sqrt();
    let mut out = vec![T::zero(); rows * width];
    let mut lse = vec![T::zero(); rows * geo.heads];
    let mut scores = vec![T::zero(); QUERY_BLOCK.min(geo.group) * geo.group];
    for (g, _) in spec.group_active.iter().enumerate().filter(|(_, &a)| a) {
        let g0 = g * geo.group;
        for head in 0..geo.heads {
            for qb in (0..geo.group).step_by(QUERY_BLOCK) {
                let b = QUERY_BLOCK.min(geo.group - qb);
                let q0 = g0 + qb;
                score_block(&geo, q, k, &spec.key_valid, g0, q0, b, head, scale, &mut scores);
                for i in 0..b {
                    let row = &mut scores[i * geo.group..(i + 1) * geo.group];
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let inv = T::one() / sum;
                    row.iter_mut().for_each(|s| *s *= inv);
                    lse[(q0 + i) * geo.heads + head] = max + sum.ln();
                }
                gemm(
                    b,
                    geo.group,
                    geo.dk,
                    T::one(),
                    &scores,
                    Layout::row_major(0, geo.group),
                    v,
                    geo.head_rows(g0, head),
                    T::zero(),
                    &mut out,
                    geo.head_rows(q0, head),
                );
            }
        }
    }
    (out, lse)
}

/// Gradients of the attention output with respect to `q`, `k`, `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    out: &[T],
    dout: &[T],
    lse: &[T],
    rows: usize,
    width: usize,
    spec: &AttentionSpec,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let geo = Geometry::new(rows, width, spec);
    let scale = T::one() / lit::<T>(geo.dk as f64).sqrt();
    let mut dq = vec![T::zero(); rows * width];
    let mut dk = vec![T::zero(); rows * width];
    let mut dv = vec![T::zero(); rows * width];

    // rowwise <dO, O> per head
    let mut delta = vec![T::zero(); rows * geo.heads];
    for r in 0..rows {
        for h in 0..geo.heads {
            let base = r * width + h * geo.dk;
            delta[r * geo.heads + h] = (0..geo.dk).map(|c| dout[base + c] * out[base + c]).sum();
        }
    }

    let block = QUERY_BLOCK.min(geo.group);
    let mut probs = vec![T::zero(); block * geo.group];
    let mut dscores = vec![T::zero(); block * geo.group];
    for (g, _) in spec.group_active.iter().enumerate().filter(|(_, &a)| a) {
        let g0 = g * geo.group;
        for head in 0..geo.heads {
            for qb in (0..geo.group).step_by(QUERY_BLOCK) {
                let b = QUERY_BLOCK.min(geo.group - qb);
                let q0 = g0 + qb;
                score_block(&geo, q, k, &spec.key_valid, g0, q0, b, head, scale, &mut probs);
                for i in 0..b {
                    let l = lse[(q0 + i) * geo.heads + head];
                    probs[i * geo.group..(i + 1) * geo.group]
                        .iter_mut()
                        .for_each(|s| *s = (*s - l).exp());
                }
                // dV += P^T dO
                gemm(
                    geo.group,
                    b,
                    geo.dk,
                    T::one(),
                    &probs,
                    Layout::transposed(0, geo.group),
                    dout,
                    geo.head_rows(q0, head),
                    T::one(),
                    &mut dv,
                    geo.head_rows(g0, head),
                );
                // dP = dO V^T
                gemm(
                    b,
                    geo.dk,
                    geo.group,
                    T::one(),
                    dout,
                    geo.head_rows(q0, head),
                    v,
                    geo.head_rows_t(g0, head),
                    T::zero(),
                    &mut dscores,
                    Layout::row_major(0, geo.group),
                );
                for i in 0..b {
                    let d = delta[(q0 + i) * geo.heads + head];
                    let span = i * geo.group..(i + 1) * geo.group;
                    for (ds, &p) in dscores[span.clone()].iter_mut().zip(&probs[span]) {
                        *ds = p * (*ds - d) * scale;
                    }
                }
                // dQ += dS K
                gemm(
                    b,
                    geo.group,
                    geo.dk,
                    T::one(),
                    &dscores,
                    Layout::row_major(0, geo.group),
                    k,
                    geo.head_rows(g0, head),
                    T::one(),
                    &mut dq,
                    geo.head_rows(q0, head),
                );
                // dK += dS^T Q
                gemm(
                    geo.group,
                    b,
                    geo.dk,
                    T::one(),
                    &dscores,
                    Layout::transposed(0, geo.group),
                    q,
                    geo.head_rows(q0, head),
                    T::one(),
                    &mut dk,
                    geo.head_rows(g0, head),
                );
            }
        }
    }
    (dq, dk, dv)
}
