use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::masking::{apply_mlm_mask, MlmCorruption};
use crate::data::seqset::{RawSubject, SeqSet};
use crate::data::vocab::{is_special, Vocab, CLS, MASK, NUM_SPECIAL, PAD};
use crate::error::{NestError, Result};
use crate::eval::metrics::{top_k, RankingResult};
use crate::model::{encode_any, mlm_logits_tied, msm_head_logits, BatchInput, ModelWeights};
use crate::numerics::{Scalar, Tape};

/// Which output layer scores the vocabulary for a masked set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetDecoder {
    /// The embedding table, shared with the MLM objective.
    #[default]
    Tied,
    MsmHead,
}

impl SetDecoder {
    pub fn name(self) -> &'static str {
        match self {
            SetDecoder::Tied => "tied",
            SetDecoder::MsmHead => "msm_head",
        }
    }
}

impl std::str::FromStr for SetDecoder {
    type Err = NestError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tied" => Ok(SetDecoder::Tied),
            "msm_head" | "msm" => Ok(SetDecoder::MsmHead),
            other => Err(NestError::Usage(format!("unknown decoder {other:?}"))),
        }
    }
}

/// Vocabulary scores for the given hidden-state rows, one `Vec` per row.
pub fn decoder_scores<T: Scalar>(
    w: &ModelWeights<T>,
    input: &BatchInput,
    rows: &[usize],
    decoder: SetDecoder,
) -> Result<Vec<Vec<T>>> {
    let mut tape = Tape::new();
    let hidden = encode_any(&mut tape, w, input, None)?;
    let logits = match decoder {
        SetDecoder::Tied => mlm_logits_tied(&mut tape, w, hidden, rows)?,
        SetDecoder::MsmHead => {
            let h = tape.gather_rows(hidden, rows)?;
            msm_head_logits(&mut tape, w, h)?
        }
    };
    let v = w.config.vocab_size;
    Ok(tape.value(logits).chunks(v).map(<[T]>::to_vec).collect())
}

/// Whether `target` ranks within the top `k` non-reserved scores, ties
/// broken by ascending id.
fn within_top_k<T: Scalar>(scores: &[T], target: usize, k: usize) -> bool {
    if is_special(target) {
        return false;
    }
    let s = scores[target];
    let ahead = (NUM_SPECIAL..scores.len())
        .filter(|&j| scores[j] > s || (scores[j] == s && j < target))
        .count();
    ahead < k
}

/// Fraction of MLM-supervised positions whose target is among the top-`k`
/// tied-decoder predictions.
pub fn masked_token_topk_accuracy<T: Scalar>(
    w: &ModelWeights<T>,
    subjects: &[SeqSet],
    k: usize,
    mlm_rate: f64,
    seed: u64,
    batch_size: usize,
) -> Result<f64> {
    let v = w.config.vocab_size;
    if k == 0 || k > v - NUM_SPECIAL {
        return Err(NestError::Input(format!("cannot rank top {k} of {} tokens", v - NUM_SPECIAL)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in subjects.chunks(batch_size.max(1)) {
        let views = apply_mlm_mask(chunk, mlm_rate, v, MlmCorruption::default(), &mut rng)?;
        let input = BatchInput::from_mlm(chunk, &views)?;
        let per = input.n * input.m;
        let rows: Vec<usize> = views
            .iter()
            .enumerate()
            .flat_map(|(b, view)| view.supervise.iter().enumerate().filter(|(_, &s)| s).map(move |(j, _)| b * per + j))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let scores = decoder_scores(w, &input, &rows, SetDecoder::Tied)?;
        for (row, sc) in rows.iter().zip(&scores) {
            let target = views[row / per].targets[row % per];
            hits += usize::from(within_top_k(sc, target, k));
            total += 1;
        }
    }
    if total == 0 {
        return Err(NestError::EmptySupervision);
    }
    Ok(hits as f64 / total as f64)
}

/// Masks every non-[CLS] slot of `set` and returns the masked copy.
pub fn mask_set(s: &SeqSet, set: usize) -> Result<SeqSet> {
    if set >= s.m || !s.set_valid[set] {
        return Err(NestError::Input(format!("set {set} of subject {} is not a valid set", s.subject_id)));
    }
    let mut out = s.clone();
    for j in 1..s.n {
        out.token_ids[set * s.n + j] = MASK;
        out.token_valid[set * s.n + j] = true;
    }
    Ok(out)
}

/// Ranks the vocabulary for one fully masked set from its [CLS] state and
/// scores the ranking against the set's distinct tokens.
pub fn tied_set_prediction<T: Scalar>(
    w: &ModelWeights<T>,
    s: &SeqSet,
    set: usize,
    k: usize,
    decoder: SetDecoder,
) -> Result<RankingResult> {
    let masked = mask_set(s, set)?;
    let input = BatchInput::from_seqsets(std::slice::from_ref(&masked))?;
    let scores = decoder_scores(w, &input, &[input.cls_row(0, set)], decoder)?;
    let truth: Vec<usize> = s.set_tokens(set).into_iter().filter(|&t| !is_special(t)).collect();
    RankingResult::score(&truth, top_k(&scores[0], k)?)
}

/// Options of the next-basket query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NbrOptions {
    pub k: usize,
    /// Number of [MASK] slots in the query basket; logits are averaged.
    pub query_masks: usize,
    /// Gap used when a history has fewer than two sets.
    pub fallback_gap: f64,
    pub decoder: SetDecoder,
}

impl Default for NbrOptions {
    fn default() -> Self {
        NbrOptions { k: 10, query_masks: 1, fallback_gap: 1.0, decoder: SetDecoder::Tied }
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 { values[mid] } else { 0.5 * (values[mid - 1] + values[mid]) })
}

/// Median gap between consecutive valid sets, if there are at least two.
pub fn median_gap(s: &SeqSet) -> Option<f64> {
    let times: Vec<f64> = (0..s.m).filter(|&i| s.set_valid[i]).map(|i| s.set_times[i]).collect();
    let mut gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    median(&mut gaps)
}

/// History with the query basket appended: the oldest set is evicted when
/// every slot is taken. Returns the grid and the query set index.
pub fn append_query_set(history: &SeqSet, opts: &NbrOptions) -> Result<(SeqSet, usize)> {
    let valid = history.num_valid_sets();
    let last = history
        .last_valid_set()
        .ok_or_else(|| NestError::Input(format!("subject {} has an empty history", history.subject_id)))?;
    if opts.query_masks == 0 || opts.query_masks >= history.n {
        return Err(NestError::Config(format!(
            "query basket needs between 1 and {} masks, got {}",
            history.n - 1,
            opts.query_masks
        )));
    }
    let t = history.set_times[last] + median_gap(history).unwrap_or(opts.fallback_gap);
    let (n, m) = (history.n, history.m);
    let mut s = history.clone();
    let q = if valid == m {
        s.token_ids.copy_within(n.., 0);
        s.token_valid.copy_within(n.., 0);
        s.set_times.copy_within(1.., 0);
        m - 1
    } else {
        valid
    };
    s.set_valid[q] = true;
    s.set_times[q] = t;
    for j in 0..n {
        let (tok, ok) = match j {
            0 => (CLS, true),
            j if j <= opts.query_masks => (MASK, true),
            _ => (PAD, false),
        };
        s.token_ids[q * n + j] = tok;
        s.token_valid[q * n + j] = ok;
    }
    for i in q + 1..m {
        s.set_times[i] = t;
    }
    Ok((s, q))
}

/// Top-`k` next-basket prediction from the logits at the query's [MASK] slots.
pub fn predict_next_basket<T: Scalar>(w: &ModelWeights<T>, history: &SeqSet, opts: &NbrOptions) -> Result<Vec<usize>> {
    let v = w.config.vocab_size;
    if opts.k == 0 || opts.k > v - NUM_SPECIAL {
        return Err(NestError::Input(format!("cannot recommend {} of {} tokens", opts.k, v - NUM_SPECIAL)));
    }
    let (s, q) = append_query_set(history, opts)?;
    let input = BatchInput::from_seqsets(std::slice::from_ref(&s))?;
    let rows: Vec<usize> = match opts.decoder {
        SetDecoder::Tied => (1..=opts.query_masks).map(|j| input.cls_row(0, q) + j).collect(),
        SetDecoder::MsmHead => vec![input.cls_row(0, q)],
    };
    let scores = decoder_scores(w, &input, &rows, opts.decoder)?;
    let mut mean = vec![T::zero(); v];
    for row in &scores {
        mean.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    top_k(&mean, opts.k)
}

/// A history with the basket that followed it.
#[derive(Clone, Debug, PartialEq)]
pub struct NbrExample {
    pub history: SeqSet,
    pub target: Vec<usize>,
}

/// Splits off the last set of a subject as the target basket. Subjects
/// with a single set, or whose last set has no known token, yield `None`.
pub fn nbr_example(raw: &RawSubject, vocab: &Vocab, n: usize, m: usize) -> Result<Option<NbrExample>> {
    let Some((last, earlier)) = raw.sets.split_last() else {
        return Ok(None);
    };
    if earlier.is_empty() {
        return Ok(None);
    }
    let mut target: Vec<usize> = last.tokens.iter().map(|t| vocab.encode(t)).filter(|&t| !is_special(t)).collect();
    target.sort_unstable();
    target.dedup();
    if target.is_empty() {
        return Ok(None);
    }
    let history = RawSubject { subject_id: raw.subject_id.clone(), sets: earlier.to_vec() };
    Ok(Some(NbrExample { history: SeqSet::encode(&history, vocab, n, m)?, target }))
}

/// Expected Recall@K of a recommender drawing `k` tokens uniformly.
pub fn random_recall_baseline(k: usize, vocab_size: usize) -> f64 {
    k as f64 / (vocab_size - NUM_SPECIAL) as f64
}
