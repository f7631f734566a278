//! The hierarchical encoder, its dense flat counterpart, and the output heads.

mod config;
mod forward;
mod input;
mod weights;

pub use config::{Architecture, ModelConfig};
pub use forward::{
    block_forward, classification_probe, cse_forward, embed_input, encode, encode_any, flat_encode,
    last_valid_cls_rows, mlm_logits_tied, msm_head_forward, msm_head_logits, nest_layer_forward,
    probe_logits, swe_forward, DropoutRng,
};
pub use input::{flatten_seqset, unflatten_tokens, BatchInput, FlatSequence};
pub use weights::{BlockParams, LayerParams, ModelWeights};
