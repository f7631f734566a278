use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MaskedBatch, SeqSet, NUM_SPECIAL};
use crate::error::{NestError, Result};
use crate::model::ModelWeights;
use crate::numerics::{Scalar, Tape};
use crate::train::mlm_objective;

pub const MIN_TRIALS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputOptions {
    pub batch: usize,
    pub trials: usize,
    pub warmup: usize,
    pub mlm_rate: f64,
    pub seed: u64,
}

impl Default for ThroughputOptions {
    fn default() -> Self {
        ThroughputOptions { batch: 4, trials: 30, warmup: 2, mlm_rate: 0.2, seed: 0 }
    }
}

/// Forward+backward tokens per second over the timed trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
    pub warmup: usize,
    pub batch: usize,
    pub tokens_per_trial: usize,
    pub threads: usize,
    pub samples: Vec<f64>,
    pub losses: Vec<f64>,
}

impl Throughput {
    pub fn relative_std(&self) -> f64 {
        self.std / self.mean
    }
}

/// `batch` subjects of `m` full sets of `n − 1` uniformly drawn tokens.
pub fn random_batch<R: Rng>(rng: &mut R, batch: usize, n: usize, m: usize, vocab_size: usize) -> Result<Vec<SeqSet>> {
    if vocab_size <= NUM_SPECIAL {
        return Err(NestError::Config("vocabulary has no ordinary tokens".into()));
    }
    (0..batch)
        .map(|b| {
            let sets: Vec<(f64, Vec<usize>)> = (0..m)
                .map(|i| (i as f64, (1..n).map(|_| rng.gen_range(NUM_SPECIAL..vocab_size)).collect()))
                .collect();
            SeqSet::from_sets(&format!("r{b}"), &sets, n, m)
        })
        .collect()
}

/// Times one masked-token forward and backward pass per trial on a fresh
/// random batch. Warmup trials run first and are discarded.
pub fn measure_throughput<T: Scalar>(w: &mut ModelWeights<T>, opts: &ThroughputOptions) -> Result<Throughput> {
    if opts.trials < MIN_TRIALS {
        return Err(NestError::Benchmark(format!("need at least {MIN_TRIALS} trials, got {}", opts.trials)));
    }
    if opts.batch == 0 {
        return Err(NestError::Benchmark("batch must hold at least one subject".into()));
    }
    let (n, m, vocab) = (w.config.n, w.config.m, w.config.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let tokens = opts.batch * n * m;
    let (mut samples, mut losses) = (Vec::with_capacity(opts.trials), Vec::with_capacity(opts.trials));
    for trial in 0..opts.warmup + opts.trials {
        let subjects = random_batch(&mut rng, opts.batch, n, m, vocab)?;
        let batch = MaskedBatch::new(&subjects, opts.mlm_rate, 0.0, vocab, rng.gen())?;
        w.params.zero_grad();
        let start = Instant::now();
        let mut tape = Tape::new();
        let loss = mlm_objective(&mut tape, w, &batch, None)?
            .ok_or_else(|| NestError::Benchmark("random batch has no masked token".into()))?;
        let value = tape.item(loss).to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(NestError::Benchmark(format!("non-finite loss {value} in trial {trial}")));
        }
        tape.backward(loss, &mut w.params)?;
        let seconds = start.elapsed().as_secs_f64();
        if trial >= opts.warmup {
            samples.push(tokens as f64 / seconds);
            losses.push(value);
        }
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
    Ok(Throughput {
        mean,
        std: var.sqrt(),
        trials: opts.trials,
        warmup: opts.warmup,
        batch: opts.batch,
        tokens_per_trial: tokens,
        threads: 1,
        samples,
        losses,
    })
}
