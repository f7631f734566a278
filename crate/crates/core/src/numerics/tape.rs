//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every op appends one node holding its output value and whatever it needs
//! for the backward sweep. [`Tape::backward`] walks the nodes in strict
//! reverse order and accumulates parameter gradients into a [`ParamSet`].

use std::collections::HashMap;

use rand::Rng;

use crate::error::{dim_err, NestError, Result};
use crate::numerics::attention::{self, AttentionSpec};
use crate::numerics::scalar::{gemm, lit, Layout, Scalar};
use crate::numerics::tensor::{ParamId, ParamSet, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, gain: Var, rstd: Vec<T> },
    Rope { x: Var, n_heads: usize, cos: Vec<T>, sin: Vec<T> },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, lse: Vec<T> },
    Softmax(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterRows { base: Var, src: Var, rows: Vec<usize> },
    Time2Vec { omega: Var, phi: Var, times: Vec<f64> },
    ExpandRows { x: Var, reps: usize, skip_first: bool },
    CrossEntropy { logits: Var, rows: Vec<(usize, usize)>, probs: Vec<T> },
    KlSimplex { logits: Var, targets: Vec<Vec<(usize, T)>>, probs: Vec<T> },
    Dropout { x: Var, keep: Vec<T> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        _ => {
            let c = *shape.last().unwrap_or(&1);
            (shape.iter().product::<usize>() / c.max(1), c)
        }
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = lit::<T>((2.0 / std::f64::consts::PI).sqrt());
    let a = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let deriv = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * a * x * x);
    (value, deriv)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, param: None, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Single element of a one-element value.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone()).expect("consistent node")
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_raw(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return dim_err("constant data does not match its shape");
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Records a parameter; repeated registration returns the same handle.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = params.get(id);
        let needs = t.requires_grad();
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, needs);
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    /// `a[p×q] · b[q×r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[p×q] · b[r×q]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return dim_err(format!("matmul needs 2-D operands, got {sa:?} and {sb:?}"));
        }
        let (p, q) = (sa[0], sa[1]);
        let (qb, r) = if transpose_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if q != qb {
            return dim_err(format!("matmul inner extents differ: {sa:?} vs {sb:?}"));
        }
        let mut out = vec![T::zero(); p * r];
        let lb = if transpose_b { Layout::transposed(0, q) } else { Layout::row_major(0, r) };
        gemm(
            p,
            q,
            r,
            T::one(),
            self.value(a),
            Layout::row_major(0, q),
            self.value(b),
            lb,
            T::zero(),
            &mut out,
            Layout::row_major(0, r),
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![p, r], out, Op::MatMul { a, b, transpose_b }, ng))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let ng = self.ng(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), ng)
    }

    /// `z·σ(z)` elementwise.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&z| z * sigmoid(z)).collect();
        let ng = self.ng(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Silu(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&z| gelu_parts(z).0).collect();
        let ng = self.ng(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = lit::<T>(self.value(a).len().max(1) as f64);
        let s = self.value(a).iter().copied().sum::<T>() / n;
        let ng = self.ng(&[a]);
        self.push(vec![1], vec![s], Op::Mean(a), ng)
    }

    /// Per-row standardisation scaled by `gain`; no additive term.
    pub fn layer_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(x));
        if d < 2 {
            return dim_err("layer norm needs at least two features");
        }
        if self.shape(gain) != [d] {
            return dim_err(format!("gain shape {:?} does not match width {d}", self.shape(gain)));
        }
        let eps = lit::<T>(LAYER_NORM_EPS);
        let dn = lit::<T>(d as f64);
        let xs = self.value(x);
        let g = self.value(gain);
        let mut out = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                out[r * d + c] = (row[c] - mean) * rs * g[c];
            }
        }
        let ng = self.ng(&[x, gain]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, gain, rstd }, ng))
    }

    /// Rotates coordinate pairs `(2i, 2i+1)` of every head by
    /// `position · base^(-2i/d_k)`, one position per row.
    pub fn rope(&mut self, x: Var, positions: &[f64], n_heads: usize, base: f64) -> Result<Var> {
        let (rows, width) = rows_cols(self.shape(x));
        if n_heads == 0 || width % n_heads != 0 {
            return dim_err(format!("width {width} does not split into {n_heads} heads"));
        }
        let dk = width / n_heads;
        if !dk.is_multiple_of(2) {
            return Err(NestError::Config(format!("rotary head width must be even, got {dk}")));
        }
        if positions.len() != rows {
            return dim_err("one position per row is required");
        }
        let half = dk / 2;
        let mut cos = vec![T::zero(); rows * half];
        let mut sin = vec![T::zero(); rows * half];
        for (r, &pos) in positions.iter().enumerate() {
            for i in 0..half {
                let angle = pos * base.powf(-2.0 * i as f64 / dk as f64);
                cos[r * half + i] = lit(angle.cos());
                sin[r * half + i] = lit(angle.sin());
            }
        }
        let out = rotate(self.value(x), rows, n_heads, dk, &cos, &sin, false);
        let ng = self.ng(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Rope { x, n_heads, cos, sin }, ng))
    }

    /// Grouped multi-head attention; see [`AttentionSpec`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        self.same_shape(q, k)?;
        self.same_shape(q, v)?;
        let (rows, width) = rows_cols(self.shape(q));
        spec.validate(rows, width)?;
        let (out, lse) =
            attention::forward(self.value(q), self.value(k), self.value(v), rows, width, &spec);
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(self.shape(q).to_vec(), out, Op::Attention { q, k, v, spec, lse }, ng))
    }

    /// Row softmax; `mask[j] == false` forces column entry to exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (rows, k) = rows_cols(self.shape(x));
        if let Some(m) = mask {
            if m.len() != rows * k {
                return dim_err("softmax mask must match the input shape");
            }
        }
        let xs = self.value(x);
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let keep = |j: usize| mask.is_none_or(|m| m[r * k + j]);
            let max = (0..k)
                .filter(|&j| keep(j))
                .map(|j| xs[r * k + j])
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() && !(0..k).any(keep) {
                return Err(NestError::DegenerateRow { row: r });
            }
            let mut sum = T::zero();
            for j in (0..k).filter(|&j| keep(j)) {
                let e = (xs[r * k + j] - max).exp();
                out[r * k + j] = e;
                sum += e;
            }
            out[r * k..(r + 1) * k].iter_mut().for_each(|v| *v /= sum);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), ng))
    }

    /// Rows of a 2-D value picked by index.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = rows_cols(self.shape(x));
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return dim_err(format!("row {bad} out of range for {n} rows"));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&xs[r * d..(r + 1) * d]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![rows.len(), d], out, Op::GatherRows { x, rows: rows.to_vec() }, ng))
    }

    /// Token-embedding lookup.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vocab = self.shape(table)[0];
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(NestError::Encoding { id, vocab });
        }
        self.gather_rows(table, ids)
    }

    /// Copy of `base` whose listed rows are replaced by the rows of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = rows_cols(self.shape(base));
        let (sn, sd) = rows_cols(self.shape(src));
        if sd != d || sn != rows.len() {
            return dim_err("scatter source does not match destination rows");
        }
        let mut out = self.value(base).to_vec();
        let mut seen = vec![false; n];
        for (i, &r) in rows.iter().enumerate() {
            if r >= n || seen[r] {
                return dim_err(format!("scatter row {r} is out of range or repeated"));
            }
            seen[r] = true;
            out[r * d..(r + 1) * d].copy_from_slice(&self.value(src)[i * d..(i + 1) * d]);
        }
        let ng = self.ng(&[base, src]);
        Ok(self.push(
            self.shape(base).to_vec(),
            out,
            Op::ScatterRows { base, src, rows: rows.to_vec() },
            ng,
        ))
    }

    /// Time2Vec features: one linear coordinate followed by sinusoids.
    pub fn time2vec(&mut self, times: &[f64], omega: Var, phi: Var) -> Result<Var> {
        self.same_shape(omega, phi)?;
        let d = self.value(omega).len();
        if times.iter().any(|t| !t.is_finite()) {
            return Err(NestError::NonFinite("time2vec input time".into()));
        }
        let (w, p) = (self.value(omega), self.value(phi));
        let mut out = vec![T::zero(); times.len() * d];
        for (r, &t) in times.iter().enumerate() {
            let t = lit::<T>(t);
            for i in 0..d {
                let z = w[i] * t + p[i];
                out[r * d + i] = if i == 0 { z } else { z.sin() };
            }
        }
        let ng = self.ng(&[omega, phi]);
        Ok(self.push(
            vec![times.len(), d],
            out,
            Op::Time2Vec { omega, phi, times: times.to_vec() },
            ng,
        ))
    }

    /// Repeats each row `reps` times; with `skip_first` the first copy is zero.
    pub fn expand_rows(&mut self, x: Var, reps: usize, skip_first: bool) -> Var {
        let (n, d) = rows_cols(self.shape(x));
        let xs = self.value(x);
        let mut out = vec![T::zero(); n * reps * d];
        for r in 0..n {
            for j in 0..reps {
                if skip_first && j == 0 {
                    continue;
                }
                let o = (r * reps + j) * d;
                out[o..o + d].copy_from_slice(&xs[r * d..(r + 1) * d]);
            }
        }
        let ng = self.ng(&[x]);
        self.push(vec![n * reps, d], out, Op::ExpandRows { x, reps, skip_first }, ng)
    }

    /// Mean negative log-likelihood of `targets` over supervised rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], supervise: &[bool]) -> Result<Var> {
        let (rows, vocab) = rows_cols(self.shape(logits));
        if targets.len() != rows || supervise.len() != rows {
            return dim_err("targets and supervision flags need one entry per row");
        }
        let picked: Vec<(usize, usize)> = (0..rows)
            .filter(|&r| supervise[r])
            .map(|r| (r, targets[r]))
            .collect();
        if picked.is_empty() {
            return Err(NestError::EmptySupervision);
        }
        if let Some(&(_, id)) = picked.iter().find(|(_, t)| *t >= vocab) {
            return Err(NestError::Encoding { id, vocab });
        }
        let xs = self.value(logits);
        let mut probs = vec![T::zero(); picked.len() * vocab];
        let mut total = T::zero();
        for (i, &(r, t)) in picked.iter().enumerate() {
            let row = &xs[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for (p, &v) in probs[i * vocab..(i + 1) * vocab].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let loss = total / lit::<T>(picked.len() as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits, rows: picked, probs }, ng))
    }

    /// Mean over rows of `KL(p_r ‖ softmax(logits_r))`, each `p_r` given sparsely
    /// as `(token, probability)` pairs summing to one.
    pub fn kl_simplex(&mut self, logits: Var, targets: &[Vec<(usize, T)>]) -> Result<Var> {
        let (rows, vocab) = rows_cols(self.shape(logits));
        if targets.len() != rows || rows == 0 {
            return dim_err("one target distribution per logit row is required");
        }
        let xs = self.value(logits);
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        for (r, target) in targets.iter().enumerate() {
            let row = &xs[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for (p, &v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            for &(v, p) in target {
                if v >= vocab {
                    return Err(NestError::Encoding { id: v, vocab });
                }
                if p > T::zero() {
                    total += p * (p.ln() - (row[v] - lse));
                }
            }
        }
        let loss = total / lit::<T>(rows as f64);
        let ng = self.ng(&[logits]);
        let targets = targets.to_vec();
        Ok(self.push(vec![1], vec![loss], Op::KlSimplex { logits, targets, probs }, ng))
    }

    /// Inverted dropout; `rate == 0` records an identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let scale = lit::<T>(1.0 / (1.0 - rate));
        let keep: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { scale })
            .collect();
        let out = self.value(x).iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Dropout { x, keep }, ng)
    }

    /// SwiGLU feed-forward: `(silu(x·W_gate) ⊙ (x·W_in)) · W_out`.
    pub fn swiglu(&mut self, x: Var, w_in: Var, w_gate: Var, w_out: Var) -> Result<Var> {
        let gate = self.matmul(x, w_gate)?;
        let gate = self.silu(gate);
        let lin = self.matmul(x, w_in)?;
        let h = self.mul(gate, lin)?;
        self.matmul(h, w_out)
    }

    /// Accumulates `d loss / d param` into every parameter reached from `loss`.
    /// Gradients add onto whatever the parameters already hold.
    pub fn backward(&self, loss: Var, params: &mut ParamSet<T>) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NestError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if let Some(id) = node.param {
                let t = params.get_mut(id);
                if t.shape() != node.shape.as_slice() {
                    return dim_err(format!("parameter {} changed shape", id.0));
                }
                if let Some(g) = t.grad_mut() {
                    g.iter_mut().zip(&dy).for_each(|(a, &b)| *a += b);
                }
                continue;
            }
            self.backprop_node(node, &dy, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if self.nodes[v.0].needs_grad {
                let len = self.nodes[v.0].value.len();
                let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
                f(g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, transpose_b } => {
                let (p, q) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let r = node.shape[1];
                if wants(a) {
                    let lb = if transpose_b { Layout::row_major(0, q) } else { Layout::transposed(0, r) };
                    acc(a, &mut |g| {
                        gemm(p, r, q, T::one(), dy, Layout::row_major(0, r), val(b), lb, T::one(), g, Layout::row_major(0, q))
                    });
                }
                if wants(b) {
                    acc(b, &mut |g| {
                        if transpose_b {
                            // dB[r×q] += dYᵀ · A
                            gemm(r, p, q, T::one(), dy, Layout::transposed(0, r), val(a), Layout::row_major(0, q), T::one(), g, Layout::row_major(0, q))
                        } else {
                            // dB[q×r] += Aᵀ · dY
                            gemm(q, p, r, T::one(), val(a), Layout::transposed(0, q), dy, Layout::row_major(0, r), T::one(), g, Layout::row_major(0, r))
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                acc(a, &mut |g| g.iter_mut().zip(dy).for_each(|(x, &d)| *x += d));
                acc(b, &mut |g| g.iter_mut().zip(dy).for_each(|(x, &d)| *x += d));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * vb[i];
                    }
                });
                acc(b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * va[i];
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, &mut |g| g.iter_mut().zip(dy).for_each(|(x, &d)| *x += d * c)),
            &Op::Silu(a) => {
                let va = val(a);
                acc(a, &mut |g| {
                    for i in 0..g.len() {
                        let s = sigmoid(va[i]);
                        g[i] += dy[i] * s * (T::one() + va[i] * (T::one() - s));
                    }
                });
            }
            &Op::Gelu(a) => {
                let va = val(a);
                acc(a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * gelu_parts(va[i]).1;
                    }
                });
            }
            &Op::Sum(a) => acc(a, &mut |g| g.iter_mut().for_each(|x| *x += dy[0])),
            &Op::Mean(a) => {
                let n = lit::<T>(val(a).len().max(1) as f64);
                acc(a, &mut |g| g.iter_mut().for_each(|x| *x += dy[0] / n));
            }
            Op::LayerNorm { x, gain, rstd } => {
                let (x, gain) = (*x, *gain);
                let (rows, d) = rows_cols(&self.nodes[x.0].shape);
                let xs = val(x);
                let gs = val(gain);
                let dn = lit::<T>(d as f64);
                let mut dx = vec![T::zero(); xs.len()];
                let mut dg = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let row = &xs[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<T>() / dn;
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for c in 0..d {
                        xhat[c] = (row[c] - mean) * rstd[r];
                        let dyc = dy[r * d + c];
                        dg[c] += dyc * xhat[c];
                        dxhat[c] = dyc * gs[c];
                        m1 += dxhat[c];
                        m2 += dxhat[c] * xhat[c];
                    }
                    m1 /= dn;
                    m2 /= dn;
                    for c in 0..d {
                        dx[r * d + c] = rstd[r] * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                acc(x, &mut |g| g.iter_mut().zip(&dx).for_each(|(a, &b)| *a += b));
                acc(gain, &mut |g| g.iter_mut().zip(&dg).for_each(|(a, &b)| *a += b));
            }
            Op::Rope { x, n_heads, cos, sin } => {
                let (rows, width) = rows_cols(&node.shape);
                let dk = width / n_heads;
                let back = rotate(dy, rows, *n_heads, dk, cos, sin, true);
                acc(*x, &mut |g| g.iter_mut().zip(&back).for_each(|(a, &b)| *a += b));
            }
            Op::Attention { q, k, v, spec, lse } => {
                let (rows, width) = rows_cols(&node.shape);
                let (dq, dk, dv) = attention::backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    &node.value,
                    dy,
                    lse,
                    rows,
                    width,
                    spec,
                );
                acc(*q, &mut |g| g.iter_mut().zip(&dq).for_each(|(a, &b)| *a += b));
                acc(*k, &mut |g| g.iter_mut().zip(&dk).for_each(|(a, &b)| *a += b));
                acc(*v, &mut |g| g.iter_mut().zip(&dv).for_each(|(a, &b)| *a += b));
            }
            &Op::Softmax(x) => {
                let (rows, k) = rows_cols(&node.shape);
                let y = &node.value;
                acc(x, &mut |g| {
                    for r in 0..rows {
                        let span = r * k..(r + 1) * k;
                        let dot: T = y[span.clone()].iter().zip(&dy[span.clone()]).map(|(&a, &b)| a * b).sum();
                        for j in span {
                            g[j] += y[j] * (dy[j] - dot);
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let d = node.shape[1];
                acc(*x, &mut |g| {
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            g[r * d + c] += dy[i * d + c];
                        }
                    }
                });
            }
            Op::ScatterRows { base, src, rows } => {
                let d = node.shape[node.shape.len() - 1];
                acc(*base, &mut |g| {
                    let mut replaced = vec![false; g.len() / d];
                    rows.iter().for_each(|&r| replaced[r] = true);
                    for (r, hit) in replaced.iter().enumerate() {
                        if !hit {
                            for c in 0..d {
                                g[r * d + c] += dy[r * d + c];
                            }
                        }
                    }
                });
                acc(*src, &mut |g| {
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            g[i * d + c] += dy[r * d + c];
                        }
                    }
                });
            }
            Op::Time2Vec { omega, phi, times } => {
                let d = node.shape[1];
                let (w, p) = (val(*omega), val(*phi));
                let mut dw = vec![T::zero(); d];
                let mut dp = vec![T::zero(); d];
                for (r, &t) in times.iter().enumerate() {
                    let t = lit::<T>(t);
                    for i in 0..d {
                        let dyi = dy[r * d + i];
                        let dz = if i == 0 { dyi } else { dyi * (w[i] * t + p[i]).cos() };
                        dw[i] += dz * t;
                        dp[i] += dz;
                    }
                }
                acc(*omega, &mut |g| g.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b));
                acc(*phi, &mut |g| g.iter_mut().zip(&dp).for_each(|(a, &b)| *a += b));
            }
            &Op::ExpandRows { x, reps, skip_first } => {
                let d = node.shape[1];
                acc(x, &mut |g| {
                    let n = g.len() / d;
                    for r in 0..n {
                        for j in usize::from(skip_first)..reps {
                            let o = (r * reps + j) * d;
                            for c in 0..d {
                                g[r * d + c] += dy[o + c];
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, rows, probs } => {
                let vocab = self.nodes[logits.0].shape[1];
                let scale = dy[0] / lit::<T>(rows.len() as f64);
                acc(*logits, &mut |g| {
                    for (i, &(r, t)) in rows.iter().enumerate() {
                        for j in 0..vocab {
                            g[r * vocab + j] += probs[i * vocab + j] * scale;
                        }
                        g[r * vocab + t] -= scale;
                    }
                });
            }
            Op::KlSimplex { logits, targets, probs } => {
                let vocab = self.nodes[logits.0].shape[1];
                let scale = dy[0] / lit::<T>(targets.len() as f64);
                acc(*logits, &mut |g| {
                    for (r, target) in targets.iter().enumerate() {
                        for j in 0..vocab {
                            g[r * vocab + j] += probs[r * vocab + j] * scale;
                        }
                        for &(v, p) in target {
                            g[r * vocab + v] -= p * scale;
                        }
                    }
                });
            }
            Op::Dropout { x, keep } => {
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * keep[i];
                    }
                });
            }
        }
    }
}

fn rotate<T: Scalar>(
    x: &[T],
    rows: usize,
    n_heads: usize,
    dk: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) -> Vec<T> {
    let half = dk / 2;
    let width = n_heads * dk;
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for h in 0..n_heads {
            for i in 0..half {
                let c = cos[r * half + i];
                let s = if inverse { -sin[r * half + i] } else { sin[r * half + i] };
                let o = r * width + h * dk + 2 * i;
                let (a, b) = (x[o], x[o + 1]);
                out[o] = a * c - b * s;
                out[o + 1] = a * s + b * c;
            }
        }
    }
    out
}
