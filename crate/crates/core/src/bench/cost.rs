use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Architecture, ModelConfig};

/// Per-token FLOPs of one transformer block whose attention spans `ctx` keys:
/// Q/K/V/O projections, scores, attention-weighted values and the three
/// SwiGLU matrices, at two FLOPs per multiply-add.
fn block_flops(config: &ModelConfig, ctx: usize) -> f64 {
    let d = config.d_model as f64;
    let inner = (config.n_heads * config.d_k) as f64;
    let projections = 2.0 * 4.0 * d * inner;
    let attention = 2.0 * 2.0 * ctx as f64 * inner;
    let ffn = 2.0 * 3.0 * d * config.d_ff as f64;
    projections + attention + ffn
}

/// Analytic FLOPs per input token of a forward pass, the tied vocabulary
/// projection included. The cross-set block runs once per set and is
/// amortized over the `n` slots of that set.
pub fn flops_per_token(config: &ModelConfig, arch: Architecture) -> Result<f64> {
    config.validate()?;
    let per_layer = match arch {
        Architecture::Dense => block_flops(config, config.context_len()),
        Architecture::Nest => block_flops(config, config.n) + block_flops(config, config.m) / config.n as f64,
    };
    let head = 2.0 * config.d_model as f64 * config.vocab_size as f64;
    Ok(config.layers as f64 * per_layer + head)
}

/// [`flops_per_token`] in GFLOPs.
pub fn count_flops_per_token(config: &ModelConfig, arch: Architecture) -> Result<f64> {
    Ok(flops_per_token(config, arch)? / 1e9)
}

/// Backbone parameters: embeddings, Time2Vec, every layer tensor and norm
/// gain. Task heads are not counted.
pub fn count_params(config: &ModelConfig, arch: Architecture) -> u64 {
    let (d, inner) = (config.d_model as u64, (config.n_heads * config.d_k) as u64);
    let block = 4 * d * inner + 3 * d * config.d_ff as u64 + 2 * d;
    let blocks_per_layer = match arch {
        Architecture::Dense => 1,
        Architecture::Nest => 2,
    };
    config.vocab_size as u64 * d + 2 * d + config.layers as u64 * blocks_per_layer * block + d
}

/// Attention score elements materialized by one forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMemory {
    /// Elements per layer per head for one subject.
    pub per_layer_head: u64,
    /// `per_layer_head` summed over layers and heads.
    pub total: u64,
    pub class: String,
}

pub fn attention_memory_estimate(config: &ModelConfig, arch: Architecture) -> AttentionMemory {
    let (n, m) = (config.n as u64, config.m as u64);
    let (per_layer_head, class) = match arch {
        Architecture::Dense => ((n * m).pow(2), "O(N^2)"),
        Architecture::Nest => (m * n * n + m * m, "O(nN + m^2)"),
    };
    AttentionMemory {
        per_layer_head,
        total: config.layers as u64 * config.n_heads as u64 * per_layer_head,
        class: class.into(),
    }
}
