use serde::{Deserialize, Serialize};

use crate::data::vocab::{Vocab, CLS, PAD};
use crate::error::{NestError, Result};

/// One timestamped multiset as it appears in a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSet {
    pub t: f64,
    pub tokens: Vec<String>,
}

/// One subject's unpadded event stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSubject {
    pub subject_id: String,
    pub sets: Vec<RawSet>,
}

/// A subject's event stream padded/truncated to an `m × n` token grid.
///
/// Valid sets occupy the leading rows in time order; slot 0 of every valid
/// set holds `[CLS]`. Padding rows and slots hold `[PAD]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqSet {
    pub subject_id: String,
    pub n: usize,
    pub m: usize,
    pub token_ids: Vec<usize>,
    pub set_times: Vec<f64>,
    pub set_valid: Vec<bool>,
    pub token_valid: Vec<bool>,
}

impl SeqSet {
    /// Builds the grid from time-sorted `(time, token ids)` sets. The most
    /// recent `m` sets are kept; each set keeps its first `n − 1` tokens.
    pub fn from_sets(subject_id: &str, sets: &[(f64, Vec<usize>)], n: usize, m: usize) -> Result<Self> {
        if n < 2 || m < 1 {
            return Err(NestError::Config(format!("need n >= 2 and m >= 1, got n={n}, m={m}")));
        }
        if sets.is_empty() {
            return Err(NestError::Input(format!("subject {subject_id} has no sets")));
        }
        if sets.windows(2).any(|w| w[1].0 < w[0].0) || sets.iter().any(|s| !s.0.is_finite()) {
            return Err(NestError::Input(format!("subject {subject_id} has unsorted or non-finite times")));
        }
        let kept = &sets[sets.len().saturating_sub(m)..];
        let mut s = SeqSet {
            subject_id: subject_id.to_string(),
            n,
            m,
            token_ids: vec![PAD; n * m],
            set_times: vec![0.0; m],
            set_valid: vec![false; m],
            token_valid: vec![false; n * m],
        };
        for (i, (t, toks)) in kept.iter().enumerate() {
            s.set_valid[i] = true;
            s.set_times[i] = *t;
            s.token_ids[i * n] = CLS;
            s.token_valid[i * n] = true;
            for (j, &tok) in toks.iter().filter(|&&t| t != PAD).take(n - 1).enumerate() {
                s.token_ids[i * n + 1 + j] = tok;
                s.token_valid[i * n + 1 + j] = true;
            }
        }
        let last = kept.last().map_or(0.0, |s| s.0);
        s.set_times[kept.len()..].iter_mut().for_each(|t| *t = last);
        Ok(s)
    }

    /// Encodes a raw subject with `vocab` and pads it to `m × n`.
    pub fn encode(raw: &RawSubject, vocab: &Vocab, n: usize, m: usize) -> Result<Self> {
        let sets: Vec<(f64, Vec<usize>)> = raw
            .sets
            .iter()
            .map(|s| (s.t, s.tokens.iter().map(|t| vocab.encode(t)).collect()))
            .collect();
        SeqSet::from_sets(&raw.subject_id, &sets, n, m)
    }

    pub fn row(&self, set: usize) -> &[usize] {
        &self.token_ids[set * self.n..(set + 1) * self.n]
    }

    pub fn num_valid_sets(&self) -> usize {
        self.set_valid.iter().filter(|&&v| v).count()
    }

    /// Index of the last valid set, if any.
    pub fn last_valid_set(&self) -> Option<usize> {
        self.set_valid.iter().rposition(|&v| v)
    }

    /// Distinct non-padding tokens of a set, in first-appearance order.
    pub fn set_tokens(&self, set: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for &tok in &self.row(set)[1..] {
            if tok != PAD && !out.contains(&tok) {
                out.push(tok);
            }
        }
        out
    }

    /// Checks every structural invariant of the grid.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(NestError::Consistency(format!("{}: {msg}", self.subject_id)));
        let (n, m) = (self.n, self.m);
        if self.token_ids.len() != n * m || self.token_valid.len() != n * m {
            return fail("grid size differs from m*n".into());
        }
        if self.set_times.len() != m || self.set_valid.len() != m {
            return fail("per-set arrays differ from m".into());
        }
        let mut prev = f64::NEG_INFINITY;
        let mut seen_invalid = false;
        for i in 0..m {
            let row = self.row(i);
            let valid = &self.token_valid[i * n..(i + 1) * n];
            if self.set_valid[i] {
                if seen_invalid {
                    return fail(format!("valid set {i} follows a padding set"));
                }
                if self.set_times[i] < prev {
                    return fail(format!("set {i} goes back in time"));
                }
                prev = self.set_times[i];
                if row[0] != CLS || !valid[0] {
                    return fail(format!("set {i} does not start with [CLS]"));
                }
                for j in 1..n {
                    if (row[j] == PAD) == valid[j] {
                        return fail(format!("slot ({i},{j}) validity disagrees with its token"));
                    }
                }
            } else {
                seen_invalid = true;
                if row.iter().any(|&t| t != PAD) || valid.iter().any(|&v| v) {
                    return fail(format!("padding set {i} holds tokens"));
                }
            }
        }
        Ok(())
    }
}

/// Encodes every subject onto an `m × n` grid.
pub fn encode_subjects(raw: &[RawSubject], vocab: &Vocab, n: usize, m: usize) -> Result<Vec<SeqSet>> {
    raw.iter().map(|r| SeqSet::encode(r, vocab, n, m)).collect()
}

/// Empirical token distribution over the `n − 1` non-[CLS] slots of a set
/// row, [PAD] mass included. Dense vector of length `vocab_size`.
pub fn empirical_set_distribution(row: &[usize], vocab_size: usize) -> Vec<f64> {
    let mut p = vec![0.0; vocab_size];
    for (tok, prob) in set_distribution(row) {
        p[tok] = prob;
    }
    p
}

/// Sparse form of [`empirical_set_distribution`], sorted by token id.
pub fn set_distribution(row: &[usize]) -> Vec<(usize, f64)> {
    let slots = row.len().saturating_sub(1);
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &tok in &row[1..] {
        match counts.iter_mut().find(|(t, _)| *t == tok) {
            Some(c) => c.1 += 1,
            None => counts.push((tok, 1)),
        }
    }
    counts.sort_unstable();
    counts.into_iter().map(|(t, c)| (t, c as f64 / slots as f64)).collect()
}
