use serde::{Deserialize, Serialize};

use crate::data::vocab::NUM_SPECIAL;
use crate::error::{NestError, Result};

/// Which encoder a set of weights drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Set-wise + cross-set layers over the `m × n` grid.
    Nest,
    /// Full attention over the flattened `N = n·m` sequence.
    Dense,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Nest => "nest",
            Architecture::Dense => "dense",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = NestError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nest" => Ok(Architecture::Nest),
            "dense" | "flat" | "bert" => Ok(Architecture::Dense),
            other => Err(NestError::Usage(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Hyperparameters shared by the hierarchical model and the flat baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    /// SwiGLU hidden width.
    pub d_ff: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub vocab_size: usize,
    /// Slots per set, [CLS] included.
    pub n: usize,
    /// Sets per sequence.
    pub m: usize,
    pub rope_base: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Whether slot 0 receives the set's time embedding.
    pub t2v_on_cls: bool,
    /// Multiplier applied to set times before Time2Vec.
    pub time_scale: f64,
    /// Fixed amplitude of the Time2Vec features, matched to the embedding
    /// init scale so time does not drown token identity.
    pub t2v_scale: f64,
    pub probe_classes: usize,
}

impl ModelConfig {
    /// Benchmark configuration: `L = 6, d_model = 768, d_h = 2048, 12 heads
    /// of 64, |V| = 45000, n = 32, m = 64`.
    pub fn benchmark() -> Self {
        ModelConfig {
            layers: 6,
            d_model: 768,
            d_ff: 2048,
            n_heads: 12,
            d_k: 64,
            vocab_size: 45_000,
            n: 32,
            m: 64,
            ..ModelConfig::tiny()
        }
    }

    /// Smallest configuration used by the gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 2,
            d_model: 8,
            d_ff: 12,
            n_heads: 2,
            d_k: 4,
            vocab_size: 11,
            n: 4,
            m: 3,
            rope_base: 10_000.0,
            dropout: 0.0,
            seed: 0,
            t2v_on_cls: true,
            time_scale: 1.0,
            t2v_scale: 0.02,
            probe_classes: 2,
        }
    }

    /// Flattened context length `N = n·m`.
    pub fn context_len(&self) -> usize {
        self.n * self.m
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NestError::Config(msg));
        for (name, v) in [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("m", self.m),
            ("probe_classes", self.probe_classes),
        ] {
            if v == 0 {
                return bad(format!("model.{name} must be at least 1"));
            }
        }
        if self.n < 2 {
            return bad("model.n must be at least 2".into());
        }
        if self.n_heads * self.d_k != self.d_model {
            return bad(format!(
                "n_heads * d_k = {} differs from d_model = {}",
                self.n_heads * self.d_k,
                self.d_model
            ));
        }
        if !self.d_k.is_multiple_of(2) {
            return bad(format!("d_k must be even for rotary encoding, got {}", self.d_k));
        }
        if self.d_model < 2 {
            return bad("d_model must be at least 2".into());
        }
        if self.vocab_size <= NUM_SPECIAL {
            return bad(format!("vocab_size must exceed the {NUM_SPECIAL} reserved ids"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.rope_base > 1.0) || !self.time_scale.is_finite() || !self.t2v_scale.is_finite() {
            return bad("rope_base must exceed 1 and time_scale, t2v_scale must be finite".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::benchmark().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::benchmark().context_len(), 2048);
    }

    #[test]
    fn invariants_are_enforced() {
        let odd = ModelConfig { d_k: 3, n_heads: 2, d_model: 6, ..ModelConfig::tiny() };
        assert!(odd.validate().is_err());
        let mismatch = ModelConfig { d_k: 2, ..ModelConfig::tiny() };
        assert!(mismatch.validate().is_err());
        let vocab = ModelConfig { vocab_size: 4, ..ModelConfig::tiny() };
        assert!(vocab.validate().is_err());
        assert_eq!("flat".parse::<Architecture>().unwrap(), Architecture::Dense);
        assert!("longformer".parse::<Architecture>().is_err());
    }
}
