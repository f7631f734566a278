use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::masking::{apply_mlm_mask, apply_msm_mask, apply_msm_mask_at_least_one, MlmCorruption};
use crate::data::seqset::SeqSet;
use crate::data::vocab::is_special;
use crate::error::{NestError, Result};
use crate::eval::{top_k, MetricSummary, RankingResult, SetDecoder};
use crate::model::{encode_any, mlm_logits_tied, msm_head_logits, BatchInput, ModelWeights};
use crate::numerics::{lit, Scalar, Tape};
use crate::train::config::TrainConfig;
use crate::train::{derive_seed, SeedStream};

/// Set-retrieval scores and held-out losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub recall: f64,
    pub ndcg: f64,
    pub mlm_loss: Option<f64>,
    pub msm_loss: Option<f64>,
    /// Masked sets that were ranked.
    pub sets: usize,
    /// Masked sets without a scorable token.
    pub skipped: usize,
}

/// How validation masks and ranks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationOptions {
    pub k: usize,
    pub decoder: SetDecoder,
    pub mlm_rate: f64,
    pub msm_rate: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl ValidationOptions {
    /// Settings of a training run, with the run's dedicated validation seed.
    pub fn from_train(cfg: &TrainConfig) -> Self {
        ValidationOptions {
            k: cfg.val_k,
            decoder: cfg.decoder,
            mlm_rate: cfg.mlm_rate,
            msm_rate: cfg.msm_rate,
            seed: derive_seed(cfg.seed, SeedStream::Validation, 0),
            batch_size: cfg.batch_size,
        }
    }
}

/// Masks whole sets at `msm_rate` with a generator seeded by `seed`, ranks
/// the vocabulary for each masked set from its [CLS] state with `decoder`,
/// and averages Recall@K and NDCG@K over the masked sets. The held-out MLM
/// and MSM losses are reported alongside.
pub fn validate_set_metrics<T: Scalar>(
    w: &ModelWeights<T>,
    val: &[SeqSet],
    opts: &ValidationOptions,
) -> Result<ValidationMetrics> {
    let ValidationOptions { k, decoder, mlm_rate, msm_rate, seed, batch_size } = *opts;
    if val.is_empty() {
        return Err(NestError::Input("validation data is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut msm = apply_msm_mask(val, msm_rate, &mut rng)?;
    if msm.iter().all(|v| v.targets.is_empty()) {
        msm = apply_msm_mask_at_least_one(val, msm_rate, &mut rng)?;
    }
    let mlm = apply_mlm_mask(val, mlm_rate, w.config.vocab_size, MlmCorruption::default(), &mut rng)?;

    let mut results: Vec<RankingResult> = Vec::new();
    let mut skipped = 0;
    let (mut msm_sum, mut msm_count) = (0.0, 0usize);
    let (mut mlm_sum, mut mlm_count) = (0.0, 0usize);
    let bs = batch_size.max(1);
    for (start, subjects) in (0..val.len()).step_by(bs).zip(val.chunks(bs)) {
        let views = &msm[start..start + subjects.len()];
        let mut rows = Vec::new();
        let mut sets = Vec::new();
        let input = BatchInput::from_msm(subjects, views)?;
        for (b, view) in views.iter().enumerate() {
            for (set, target) in view.selected_sets().zip(&view.targets) {
                rows.push(input.cls_row(b, set));
                sets.push((b, set, target));
            }
        }
        if !rows.is_empty() {
            let mut tape = Tape::new();
            let hidden = encode_any(&mut tape, w, &input, None)?;
            let cls = tape.gather_rows(hidden, &rows)?;
            let head = msm_head_logits(&mut tape, w, cls)?;
            let targets: Vec<Vec<(usize, T)>> =
                sets.iter().map(|(_, _, t)| t.iter().map(|&(v, p)| (v, lit(p))).collect()).collect();
            let kl = tape.kl_simplex(head, &targets)?;
            msm_sum += tape.item(kl).to_f64().unwrap_or(f64::NAN) * rows.len() as f64;
            msm_count += rows.len();
            let scores = match decoder {
                SetDecoder::MsmHead => head,
                SetDecoder::Tied => mlm_logits_tied(&mut tape, w, hidden, &rows)?,
            };
            let v = w.config.vocab_size;
            for ((b, set, _), row) in sets.iter().zip(tape.value(scores).chunks(v)) {
                let truth: Vec<usize> =
                    subjects[*b].set_tokens(*set).into_iter().filter(|&t| !is_special(t)).collect();
                if truth.is_empty() {
                    skipped += 1;
                    continue;
                }
                results.push(RankingResult::score(&truth, top_k(row, k)?)?);
            }
        }

        let mviews = &mlm[start..start + subjects.len()];
        let supervised: usize = mviews.iter().map(|v| v.num_supervised()).sum();
        if supervised > 0 {
            let input = BatchInput::from_mlm(subjects, mviews)?;
            let per = input.n * input.m;
            let rows: Vec<usize> = mviews
                .iter()
                .enumerate()
                .flat_map(|(b, v)| v.supervise.iter().enumerate().filter(|(_, &s)| s).map(move |(j, _)| b * per + j))
                .collect();
            let targets: Vec<usize> = rows.iter().map(|&r| mviews[r / per].targets[r % per]).collect();
            let mut tape = Tape::new();
            let hidden = encode_any(&mut tape, w, &input, None)?;
            let logits = mlm_logits_tied(&mut tape, w, hidden, &rows)?;
            let ce = tape.cross_entropy(logits, &targets, &vec![true; rows.len()])?;
            mlm_sum += tape.item(ce).to_f64().unwrap_or(f64::NAN) * rows.len() as f64;
            mlm_count += rows.len();
        }
    }
    let summary = MetricSummary::from_results(&results, skipped);
    Ok(ValidationMetrics {
        recall: summary.recall,
        ndcg: summary.ndcg,
        mlm_loss: (mlm_count > 0).then(|| mlm_sum / mlm_count as f64),
        msm_loss: (msm_count > 0).then(|| msm_sum / msm_count as f64),
        sets: summary.count,
        skipped,
    })
}
