use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::vocab::NUM_SPECIAL;
use crate::error::{NestError, Result};
use crate::numerics::Scalar;

fn prepare(truth: &[usize], predicted: &[usize], k: usize) -> Result<BTreeSet<usize>> {
    if predicted.len() != k {
        return Err(NestError::Dimension(format!("expected {k} predictions, got {}", predicted.len())));
    }
    let set: BTreeSet<usize> = truth.iter().copied().collect();
    if set.is_empty() {
        return Err(NestError::UndefinedMetric("empty ground-truth set".into()));
    }
    Ok(set)
}

/// `|T ∩ P| / |T|` with `T` deduplicated.
pub fn recall_at_k(truth: &[usize], predicted: &[usize], k: usize) -> Result<f64> {
    let set = prepare(truth, predicted, k)?;
    let hits = predicted.iter().collect::<BTreeSet<_>>().into_iter().filter(|p| set.contains(p)).count();
    Ok(hits as f64 / set.len() as f64)
}

/// Binary-relevance NDCG over the first `k` ranks.
pub fn ndcg_at_k(truth: &[usize], predicted: &[usize], k: usize) -> Result<f64> {
    let set = prepare(truth, predicted, k)?;
    let mut seen = BTreeSet::new();
    let dcg: f64 = predicted
        .iter()
        .enumerate()
        .filter(|(_, p)| set.contains(p) && seen.insert(**p))
        .map(|(r, _)| 1.0 / (r as f64 + 2.0).log2())
        .sum();
    let idcg: f64 = (0..k.min(set.len())).map(|r| 1.0 / (r as f64 + 2.0).log2()).sum();
    Ok(dcg / idcg)
}

/// Indices of the `k` largest scores, ties broken by ascending index; the
/// reserved ids are never returned.
pub fn top_k<T: Scalar>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    let candidates = scores.len().saturating_sub(NUM_SPECIAL);
    if k == 0 || k > candidates {
        return Err(NestError::Input(format!("cannot rank top {k} of {candidates} non-reserved tokens")));
    }
    let mut ids: Vec<usize> = (NUM_SPECIAL..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    ids.truncate(k);
    Ok(ids)
}

/// Ground truth, ranked predictions, and their scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
    pub recall: f64,
    pub ndcg: f64,
}

impl RankingResult {
    pub fn score(truth: &[usize], predicted: Vec<usize>) -> Result<Self> {
        let k = predicted.len();
        let truth: Vec<usize> = truth.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        Ok(RankingResult {
            recall: recall_at_k(&truth, &predicted, k)?,
            ndcg: ndcg_at_k(&truth, &predicted, k)?,
            truth,
            predicted,
        })
    }
}

/// Means over scored items with a count of skipped ones.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub skipped: usize,
    pub recall: f64,
    pub ndcg: f64,
}

impl MetricSummary {
    pub fn from_results<'a>(results: impl IntoIterator<Item = &'a RankingResult>, skipped: usize) -> Self {
        let mut s = MetricSummary { skipped, ..Default::default() };
        for r in results {
            s.count += 1;
            s.recall += r.recall;
            s.ndcg += r.ndcg;
        }
        if s.count > 0 {
            s.recall /= s.count as f64;
            s.ndcg /= s.count as f64;
        }
        s
    }
}
