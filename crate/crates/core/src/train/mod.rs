//! Two-pass MLM + MSM pretraining with set-based validation, early stopping,
//! and checkpoints.

mod checkpoint;
mod config;
mod fit;
mod optim;
mod step;
mod validate;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, Checkpoint, Manifest, TensorEntry, TensorGroup,
    CHECKPOINT_BLOB, CHECKPOINT_MANIFEST,
};
pub use config::TrainConfig;
pub use fit::{fit, read_metrics, EarlyStopping, EpochRecord, FitOptions, TrainReport, METRICS_CSV};
pub use optim::{learning_rate, AdamW, OptimState};
pub use step::{accumulate_gradients, joint_gradients, mlm_objective, msm_objective, pretrain_step, StepLosses};
pub use validate::{validate_set_metrics, ValidationMetrics, ValidationOptions};

/// Independent random streams of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedStream {
    Masking = 1,
    Dropout = 2,
    Shuffle = 3,
    Validation = 4,
}

/// Seed for `index` within `stream`, mixed from the run seed with SplitMix64.
pub fn derive_seed(seed: u64, stream: SeedStream, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((stream as u64) << 56)
        .wrapping_add(index);
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[cfg(test)]
mod tests;
