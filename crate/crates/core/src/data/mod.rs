//! Event-stream data: vocabulary, padded SeqSet grids, MLM/MSM masking,
//! synthetic generation and dataset ingestion.

pub mod instacart;
pub mod io;
pub mod masking;
pub mod seqset;
pub mod synthetic;
pub mod vocab;

pub use instacart::ingest_instacart;
pub use io::{content_hash, dataset_hash, file_hash, read_dataset, split_of, write_dataset, Split};
pub use masking::{
    apply_mlm_mask, apply_msm_mask, apply_msm_mask_at_least_one, MaskedBatch, MlmCorruption, MlmView, MsmView,
};
pub use seqset::{empirical_set_distribution, encode_subjects, set_distribution, RawSet, RawSubject, SeqSet};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticDataset};
pub use vocab::{is_special, Vocab, CLS, MASK, NUM_SPECIAL, PAD, SPECIAL_TOKENS, UNK};
