//! Token-level (MLM) and set-level (MSM) corruption of SeqSet batches.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::seqset::{set_distribution, SeqSet};
use crate::data::vocab::{MASK, NUM_SPECIAL, PAD};
use crate::error::{NestError, Result};

/// How a selected MLM position is corrupted; the remainder stays unchanged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmCorruption {
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for MlmCorruption {
    fn default() -> Self {
        MlmCorruption { mask_prob: 0.8, random_prob: 0.1 }
    }
}

impl MlmCorruption {
    pub const ALWAYS_MASK: MlmCorruption = MlmCorruption { mask_prob: 1.0, random_prob: 0.0 };
}

/// Token-corrupted copy of one subject with per-slot supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmView {
    pub tokens: Vec<usize>,
    pub token_valid: Vec<bool>,
    pub targets: Vec<usize>,
    pub supervise: Vec<bool>,
}

impl MlmView {
    pub fn num_supervised(&self) -> usize {
        self.supervise.iter().filter(|&&s| s).count()
    }
}

/// Set-masked copy of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct MsmView {
    pub tokens: Vec<usize>,
    pub token_valid: Vec<bool>,
    pub selected: Vec<bool>,
    /// Target distribution of every selected set, in set order.
    pub targets: Vec<Vec<(usize, f64)>>,
}

impl MsmView {
    pub fn selected_sets(&self) -> impl Iterator<Item = usize> + '_ {
        self.selected.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i)
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(NestError::Config(format!("masking rate {rate} outside [0, 1]")));
    }
    Ok(())
}

/// Selects every valid non-[CLS], non-[PAD] token with probability `rate`.
pub fn apply_mlm_mask<R: Rng + ?Sized>(
    batch: &[SeqSet],
    rate: f64,
    vocab_size: usize,
    corruption: MlmCorruption,
    rng: &mut R,
) -> Result<Vec<MlmView>> {
    check_rate(rate)?;
    let mut out = Vec::with_capacity(batch.len());
    for s in batch {
        let mut view = MlmView {
            tokens: s.token_ids.clone(),
            token_valid: s.token_valid.clone(),
            targets: s.token_ids.clone(),
            supervise: vec![false; s.token_ids.len()],
        };
        for i in (0..s.m).filter(|&i| s.set_valid[i]) {
            for j in 1..s.n {
                let pos = i * s.n + j;
                if s.token_ids[pos] == PAD || !rng.gen_bool(rate) {
                    continue;
                }
                view.supervise[pos] = true;
                let u: f64 = rng.gen();
                if u < corruption.mask_prob || vocab_size <= NUM_SPECIAL {
                    view.tokens[pos] = MASK;
                } else if u < corruption.mask_prob + corruption.random_prob {
                    view.tokens[pos] = rng.gen_range(NUM_SPECIAL..vocab_size);
                }
            }
        }
        out.push(view);
    }
    Ok(out)
}

fn msm_view(s: &SeqSet, selected: Vec<bool>) -> MsmView {
    let mut view = MsmView {
        tokens: s.token_ids.clone(),
        token_valid: s.token_valid.clone(),
        targets: Vec::new(),
        selected,
    };
    for i in 0..s.m {
        if !view.selected[i] {
            continue;
        }
        view.targets.push(set_distribution(s.row(i)));
        for j in 1..s.n {
            view.tokens[i * s.n + j] = MASK;
            view.token_valid[i * s.n + j] = true;
        }
    }
    view
}

/// Selects every valid set with probability `rate` and replaces all of its
/// non-[CLS] slots, padding included, with [MASK].
pub fn apply_msm_mask<R: Rng + ?Sized>(batch: &[SeqSet], rate: f64, rng: &mut R) -> Result<Vec<MsmView>> {
    check_rate(rate)?;
    Ok(batch
        .iter()
        .map(|s| {
            let selected = s.set_valid.iter().map(|&v| v && rng.gen_bool(rate)).collect();
            msm_view(s, selected)
        })
        .collect())
}

/// Like [`apply_msm_mask`], but a subject with no selected set gets one
/// valid set chosen uniformly.
pub fn apply_msm_mask_at_least_one<R: Rng + ?Sized>(
    batch: &[SeqSet],
    rate: f64,
    rng: &mut R,
) -> Result<Vec<MsmView>> {
    check_rate(rate)?;
    Ok(batch
        .iter()
        .map(|s| {
            let mut selected: Vec<bool> = s.set_valid.iter().map(|&v| v && rng.gen_bool(rate)).collect();
            let valid: Vec<usize> = (0..s.m).filter(|&i| s.set_valid[i]).collect();
            if !selected.iter().any(|&x| x) && !valid.is_empty() {
                selected[valid[rng.gen_range(0..valid.len())]] = true;
            }
            msm_view(s, selected)
        })
        .collect())
}

/// A batch with two independently drawn corruptions.
#[derive(Clone, Debug)]
pub struct MaskedBatch {
    pub subjects: Vec<SeqSet>,
    pub mlm: Vec<MlmView>,
    pub msm: Vec<MsmView>,
}

impl MaskedBatch {
    /// Both views are drawn from separate streams of a generator seeded with `seed`.
    pub fn new(subjects: &[SeqSet], mlm_rate: f64, msm_rate: f64, vocab_size: usize, seed: u64) -> Result<Self> {
        let mut mlm_rng = ChaCha8Rng::seed_from_u64(seed);
        mlm_rng.set_stream(1);
        let mut msm_rng = ChaCha8Rng::seed_from_u64(seed);
        msm_rng.set_stream(2);
        Ok(MaskedBatch {
            subjects: subjects.to_vec(),
            mlm: apply_mlm_mask(subjects, mlm_rate, vocab_size, MlmCorruption::default(), &mut mlm_rng)?,
            msm: apply_msm_mask(subjects, msm_rate, &mut msm_rng)?,
        })
    }

    pub fn num_supervised(&self) -> usize {
        self.mlm.iter().map(MlmView::num_supervised).sum()
    }

    pub fn num_selected_sets(&self) -> usize {
        self.msm.iter().map(|v| v.targets.len()).sum()
    }
}
