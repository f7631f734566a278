use crate::data::masking::{MlmView, MsmView};
use crate::data::seqset::SeqSet;
use crate::error::{NestError, Result};

/// A batch laid out as `B·m·n` rows: subject-major, then set, then slot.
/// The same layout serves the flat baseline, whose position `i·n + j` is the
/// row-major flattening of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInput {
    pub batch: usize,
    pub n: usize,
    pub m: usize,
    pub tokens: Vec<usize>,
    /// Slots that may be attended to.
    pub token_valid: Vec<bool>,
    pub set_valid: Vec<bool>,
    pub set_times: Vec<f64>,
}

impl BatchInput {
    fn build<'a>(subjects: &[SeqSet], grids: impl Iterator<Item = (&'a [usize], &'a [bool])>) -> Result<Self> {
        let first = subjects.first().ok_or_else(|| NestError::Input("empty batch".into()))?;
        let (n, m) = (first.n, first.m);
        let mut input = BatchInput {
            batch: subjects.len(),
            n,
            m,
            tokens: Vec::with_capacity(subjects.len() * n * m),
            token_valid: Vec::with_capacity(subjects.len() * n * m),
            set_valid: Vec::with_capacity(subjects.len() * m),
            set_times: Vec::with_capacity(subjects.len() * m),
        };
        for (s, (tokens, valid)) in subjects.iter().zip(grids) {
            if s.n != n || s.m != m || tokens.len() != n * m {
                return Err(NestError::Dimension(format!(
                    "subject {} has a {}x{} grid, batch expects {m}x{n}",
                    s.subject_id, s.m, s.n
                )));
            }
            input.tokens.extend_from_slice(tokens);
            input.token_valid.extend_from_slice(valid);
            input.set_valid.extend_from_slice(&s.set_valid);
            input.set_times.extend_from_slice(&s.set_times);
        }
        Ok(input)
    }

    pub fn from_seqsets(subjects: &[SeqSet]) -> Result<Self> {
        Self::build(subjects, subjects.iter().map(|s| (s.token_ids.as_slice(), s.token_valid.as_slice())))
    }

    pub fn from_mlm(subjects: &[SeqSet], views: &[MlmView]) -> Result<Self> {
        Self::build(subjects, views.iter().map(|v| (v.tokens.as_slice(), v.token_valid.as_slice())))
    }

    pub fn from_msm(subjects: &[SeqSet], views: &[MsmView]) -> Result<Self> {
        Self::build(subjects, views.iter().map(|v| (v.tokens.as_slice(), v.token_valid.as_slice())))
    }

    pub fn rows(&self) -> usize {
        self.batch * self.m * self.n
    }

    /// Row of the [CLS] slot of set `set` of subject `b`.
    pub fn cls_row(&self, b: usize, set: usize) -> usize {
        (b * self.m + set) * self.n
    }

    /// Rows of every [CLS] slot in subject-major order.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch * self.m).map(|i| i * self.n).collect()
    }

    pub fn subject_has_valid_set(&self, b: usize) -> bool {
        self.set_valid[b * self.m..(b + 1) * self.m].iter().any(|&v| v)
    }
}

/// A subject flattened into one sequence of `N = n·m` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatSequence {
    pub tokens: Vec<usize>,
    pub times: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Row-major concatenation of the grid; [CLS] slots stay as set delimiters
/// and every token carries its set's time.
pub fn flatten_seqset(s: &SeqSet) -> FlatSequence {
    let times = (0..s.m * s.n).map(|pos| s.set_times[pos / s.n]).collect();
    FlatSequence { tokens: s.token_ids.clone(), times, valid: s.token_valid.clone() }
}

/// Inverse of [`flatten_seqset`] back onto an `m × n` token grid.
pub fn unflatten_tokens(flat: &FlatSequence, n: usize) -> Vec<Vec<usize>> {
    flat.tokens.chunks(n).map(<[usize]>::to_vec).collect()
}

