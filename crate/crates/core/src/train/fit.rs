use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::masking::MaskedBatch;
use crate::data::seqset::SeqSet;
use crate::error::{NestError, Result};
use crate::model::ModelWeights;
use crate::numerics::Scalar;
use crate::train::checkpoint::save_checkpoint;
use crate::train::config::TrainConfig;
use crate::train::optim::{learning_rate, OptimState};
use crate::train::step::pretrain_step;
use crate::train::validate::{validate_set_metrics, ValidationMetrics, ValidationOptions};
use crate::train::{derive_seed, SeedStream};

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub mlm_loss: Option<f64>,
    pub msm_loss: Option<f64>,
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    pub seconds: f64,
}

/// Patience-based stopping on a metric that should increase.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::NEG_INFINITY, best_epoch: None, bad_epochs: 0 }
    }

    /// Records an epoch's metric; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        if value > self.best {
            self.best = value;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            (true, false)
        } else {
            self.bad_epochs += 1;
            (false, self.bad_epochs >= self.patience)
        }
    }
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Directory receiving the best checkpoint and `metrics.csv`.
    pub out_dir: Option<PathBuf>,
    /// Provenance stored with each checkpoint.
    pub metadata: serde_json::Value,
    /// Lines written as `# ` comments above the `metrics.csv` header.
    pub preamble: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_ndcg: f64,
    pub best_validation: Option<ValidationMetrics>,
    pub stopped_early: bool,
    pub skipped_steps: usize,
    pub steps: u64,
}

pub const METRICS_CSV: &str = "metrics.csv";

/// Reads the per-epoch rows of a `metrics.csv`, skipping `#` comment lines.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Pretrains `weights` on `train`, validating after every epoch and stopping
/// once validation NDCG@K has not improved for `patience` epochs. On return
/// `weights` hold the best epoch's parameters.
pub fn fit<T: Scalar>(
    weights: &mut ModelWeights<T>,
    optim: &mut OptimState<T>,
    train: &[SeqSet],
    val: &[SeqSet],
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(NestError::Input("training data is empty".into()));
    }
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = batches_per_epoch * cfg.epochs as u64;
    let val_opts = ValidationOptions::from_train(cfg);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = weights.clone();
    let mut report = TrainReport {
        config: cfg.clone(),
        records: Vec::new(),
        best_epoch: None,
        best_ndcg: f64::NEG_INFINITY,
        best_validation: None,
        stopped_early: false,
        skipped_steps: 0,
        steps: 0,
    };
    let mut csv = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut file = std::fs::File::create(dir.join(METRICS_CSV))?;
            for line in opts.preamble.iter().flat_map(|l| l.lines()) {
                writeln!(file, "# {line}")?;
            }
            Some(csv::Writer::from_writer(file))
        }
        None => None,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = optim.step;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SeedStream::Shuffle, epoch as u64)));
        let (mut mlm, mut msm) = (Vec::new(), Vec::new());
        for chunk in order.chunks(cfg.batch_size) {
            let subjects: Vec<SeqSet> = chunk.iter().map(|&i| train[i].clone()).collect();
            let mask_seed = derive_seed(cfg.seed, SeedStream::Masking, step);
            let batch = MaskedBatch::new(&subjects, cfg.mlm_rate, cfg.msm_rate, weights.config.vocab_size, mask_seed)?;
            let lr = learning_rate(cfg.lr, step, total_steps, cfg.warmup_frac);
            let losses = pretrain_step(weights, optim, &batch, cfg, lr, derive_seed(cfg.seed, SeedStream::Dropout, step))?;
            step += 1;
            if losses.skipped() {
                report.skipped_steps += 1;
            }
            mlm.extend(losses.mlm);
            msm.extend(losses.msm);
        }
        let metrics = validate_set_metrics(weights, val, &val_opts)?;
        let record = EpochRecord {
            epoch,
            step,
            mlm_loss: mean(&mlm),
            msm_loss: mean(&msm),
            recall_at_k: metrics.recall,
            ndcg_at_k: metrics.ndcg,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = csv.as_mut() {
            w.serialize(&record)?;
            w.flush()?;
        }
        report.records.push(record);
        let (improved, stop) = stopper.update(epoch, metrics.ndcg);
        if improved {
            best = weights.clone();
            report.best_validation = Some(metrics);
            if let Some(dir) = &opts.out_dir {
                save_checkpoint(dir, weights, Some(optim), Some(cfg), opts.metadata.clone())?;
            }
        }
        if stop {
            report.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    report.best_epoch = stopper.best_epoch;
    report.best_ndcg = stopper.best;
    report.steps = step;
    *weights = best;
    Ok(report)
}
