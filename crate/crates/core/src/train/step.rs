use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::masking::MaskedBatch;
use crate::error::{NestError, Result};
use crate::model::{encode_any, mlm_logits_tied, msm_head_logits, BatchInput, DropoutRng, ModelWeights};
use crate::numerics::{lit, Scalar, Tape, Var};
use crate::train::config::TrainConfig;
use crate::train::optim::{AdamW, OptimState};

/// Unweighted objective values of one step; `None` when a view supervised
/// nothing or its weight is zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub mlm: Option<f64>,
    pub msm: Option<f64>,
}

impl StepLosses {
    pub fn skipped(&self) -> bool {
        self.mlm.is_none() && self.msm.is_none()
    }
}

fn flat_rows(per: usize, flags: impl Iterator<Item = (usize, usize)>) -> Vec<usize> {
    flags.map(|(b, j)| b * per + j).collect()
}

/// Masked-token cross-entropy of the MLM view, or `None` without supervision.
pub fn mlm_objective<T: Scalar>(
    tape: &mut Tape<T>,
    w: &ModelWeights<T>,
    batch: &MaskedBatch,
    rng: DropoutRng<'_>,
) -> Result<Option<Var>> {
    if batch.num_supervised() == 0 {
        return Ok(None);
    }
    let input = BatchInput::from_mlm(&batch.subjects, &batch.mlm)?;
    let per = input.n * input.m;
    let rows = flat_rows(
        per,
        batch
            .mlm
            .iter()
            .enumerate()
            .flat_map(|(b, v)| v.supervise.iter().enumerate().filter(|(_, &s)| s).map(move |(j, _)| (b, j))),
    );
    let targets: Vec<usize> = rows.iter().map(|&r| batch.mlm[r / per].targets[r % per]).collect();
    let hidden = encode_any(tape, w, &input, rng)?;
    let logits = mlm_logits_tied(tape, w, hidden, &rows)?;
    Ok(Some(tape.cross_entropy(logits, &targets, &vec![true; rows.len()])?))
}

/// Mean KL divergence over the selected sets of the MSM view.
pub fn msm_objective<T: Scalar>(
    tape: &mut Tape<T>,
    w: &ModelWeights<T>,
    batch: &MaskedBatch,
    rng: DropoutRng<'_>,
) -> Result<Option<Var>> {
    if batch.num_selected_sets() == 0 {
        return Ok(None);
    }
    let input = BatchInput::from_msm(&batch.subjects, &batch.msm)?;
    let mut rows = Vec::new();
    let mut targets: Vec<Vec<(usize, T)>> = Vec::new();
    for (b, view) in batch.msm.iter().enumerate() {
        for (set, target) in view.selected_sets().zip(&view.targets) {
            rows.push(input.cls_row(b, set));
            targets.push(target.iter().map(|&(v, p)| (v, lit(p))).collect());
        }
    }
    let hidden = encode_any(tape, w, &input, rng)?;
    let cls = tape.gather_rows(hidden, &rows)?;
    let logits = msm_head_logits(tape, w, cls)?;
    Ok(Some(tape.kl_simplex(logits, &targets)?))
}

fn checked(tape: &Tape<impl Scalar>, v: Var, what: &str) -> Result<f64> {
    let x = tape.item(v).to_f64().unwrap_or(f64::NAN);
    if !x.is_finite() {
        return Err(NestError::NonFinite(format!("{what} loss is {x}")));
    }
    Ok(x)
}

fn dropout_rng(w: &ModelWeights<impl Scalar>, seed: u64) -> Option<ChaCha8Rng> {
    (w.config.dropout > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed))
}

/// Clears gradients, then runs the MLM view forward and backward, releases
/// its tape, and does the same for the MSM view. Gradients accumulate to
/// those of `mlm_weight·ℓ_mlm + msm_weight·ℓ_msm`.
pub fn accumulate_gradients<T: Scalar>(
    w: &mut ModelWeights<T>,
    batch: &MaskedBatch,
    cfg: &TrainConfig,
    dropout_seed: u64,
) -> Result<StepLosses> {
    w.params.zero_grad();
    let mut rng = dropout_rng(w, dropout_seed);
    let mut losses = StepLosses::default();
    if cfg.mlm_weight > 0.0 {
        let mut tape = Tape::new();
        if let Some(l) = mlm_objective(&mut tape, w, batch, rng.as_mut())? {
            losses.mlm = Some(checked(&tape, l, "MLM")?);
            let scaled = tape.scale(l, lit(cfg.mlm_weight));
            tape.backward(scaled, &mut w.params)?;
        }
    }
    if cfg.msm_weight > 0.0 {
        let mut tape = Tape::new();
        if let Some(l) = msm_objective(&mut tape, w, batch, rng.as_mut())? {
            losses.msm = Some(checked(&tape, l, "MSM")?);
            let scaled = tape.scale(l, lit(cfg.msm_weight));
            tape.backward(scaled, &mut w.params)?;
        }
    }
    Ok(losses)
}

/// Gradients of the combined loss from a single tape; the reference for
/// [`accumulate_gradients`].
pub fn joint_gradients<T: Scalar>(w: &mut ModelWeights<T>, batch: &MaskedBatch, cfg: &TrainConfig) -> Result<StepLosses> {
    w.params.zero_grad();
    let mut tape = Tape::new();
    let mut losses = StepLosses::default();
    let mut total: Option<Var> = None;
    let parts = [
        (cfg.mlm_weight, mlm_objective(&mut tape, w, batch, None)?),
        (cfg.msm_weight, msm_objective(&mut tape, w, batch, None)?),
    ];
    for (i, (weight, part)) in parts.into_iter().enumerate() {
        let Some(l) = part.filter(|_| weight > 0.0) else { continue };
        let value = Some(checked(&tape, l, "joint")?);
        if i == 0 {
            losses.mlm = value;
        } else {
            losses.msm = value;
        }
        let scaled = tape.scale(l, lit(weight));
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    if let Some(t) = total {
        tape.backward(t, &mut w.params)?;
    }
    Ok(losses)
}

/// Two-pass gradient accumulation followed by one optimizer update. A batch
/// with nothing to supervise leaves weights and optimizer untouched.
pub fn pretrain_step<T: Scalar>(
    w: &mut ModelWeights<T>,
    state: &mut OptimState<T>,
    batch: &MaskedBatch,
    cfg: &TrainConfig,
    lr: f64,
    dropout_seed: u64,
) -> Result<StepLosses> {
    let losses = accumulate_gradients(w, batch, cfg, dropout_seed)?;
    if !losses.skipped() {
        AdamW::from_config(cfg).step(&mut w.params, state, lr)?;
    }
    Ok(losses)
}
