use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::eval::SetDecoder;

/// Optimisation, masking, and validation settings of a pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mlm_rate: f64,
    pub msm_rate: f64,
    pub mlm_weight: f64,
    pub msm_weight: f64,
    pub val_k: usize,
    pub patience: usize,
    pub decoder: SetDecoder,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_frac: 0.05,
            batch_size: 16,
            epochs: 10,
            mlm_rate: 0.20,
            msm_rate: 0.40,
            mlm_weight: 1.0,
            msm_weight: 1.0,
            val_k: 10,
            patience: 3,
            decoder: SetDecoder::Tied,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NestError::Config(msg));
        for (name, r) in [("mlm_rate", self.mlm_rate), ("msm_rate", self.msm_rate)] {
            if !(r > 0.0 && r < 1.0) {
                return bad(format!("train.{name} = {r} must lie in (0, 1)"));
            }
        }
        for (name, v) in [("mlm_weight", self.mlm_weight), ("msm_weight", self.msm_weight)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("train.{name} = {v} must be a finite non-negative number"));
            }
        }
        if self.mlm_weight == 0.0 && self.msm_weight == 0.0 {
            return bad("train.mlm_weight and train.msm_weight cannot both be zero".into());
        }
        if self.patience == 0 || self.batch_size == 0 || self.val_k == 0 {
            return bad("train.patience, train.batch_size and train.val_k must be at least 1".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.lr must be positive and train.beta1, train.beta2 in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("train.eps > 0, train.weight_decay >= 0 and train.warmup_frac in [0, 1] are required".into());
        }
        Ok(())
    }
}
