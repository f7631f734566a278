use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::masking::{MaskedBatch, MlmView, MsmView};
use crate::data::seqset::{encode_subjects, SeqSet};
use crate::data::synthetic::{generate_synthetic, SyntheticConfig};
use crate::error::NestError;
use crate::model::{Architecture, ModelConfig, ModelWeights};

fn small_model(vocab_size: usize, n: usize, m: usize) -> ModelConfig {
    ModelConfig { layers: 2, d_model: 16, d_ff: 24, n_heads: 2, d_k: 8, vocab_size, n, m, ..ModelConfig::tiny() }
}

fn synthetic(subjects: usize, seed: u64) -> (SyntheticConfig, Vec<SeqSet>) {
    let cfg = SyntheticConfig { subjects, m: 4, n: 5, vocab_size: 44, topics: 4, min_sets: 2, min_set_size: 2, seed, ..Default::default() };
    let data = generate_synthetic(&cfg).unwrap();
    let sets = encode_subjects(&data.subjects, &data.vocab, cfg.n, cfg.m).unwrap();
    (cfg, sets)
}

fn grads(w: &ModelWeights<f64>) -> Vec<f64> {
    w.params.iter().flat_map(|(_, t)| t.grad().unwrap().to_vec()).collect()
}

fn perturbed(cfg: &ModelConfig, seed: u64) -> ModelWeights<f64> {
    let mut w = ModelWeights::<f64>::init(cfg, Architecture::Nest).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in w.params.ids().collect::<Vec<_>>() {
        w.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
    w
}

#[test]
fn two_pass_gradients_equal_joint_gradients() {
    let (scfg, sets) = synthetic(6, 1);
    let cfg = small_model(scfg.vocab_size, scfg.n, scfg.m);
    let batch = MaskedBatch::new(&sets, 0.3, 0.5, cfg.vocab_size, 7).unwrap();
    assert!(batch.num_supervised() > 0 && batch.num_selected_sets() > 0);
    let tcfg = TrainConfig { msm_weight: 0.7, ..Default::default() };
    let mut w = perturbed(&cfg, 2);
    let split = accumulate_gradients(&mut w, &batch, &tcfg, 0).unwrap();
    let a = grads(&w);
    let joint = joint_gradients(&mut w, &batch, &tcfg).unwrap();
    let b = grads(&w);
    assert_eq!(split, joint);
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs() / (x.abs() + y.abs() + 1e-12 * scale)).fold(0.0, f64::max);
    assert!(worst < 1e-10, "max relative difference {worst}");
}

#[test]
fn zero_msm_weight_is_mlm_only() {
    let (scfg, sets) = synthetic(4, 2);
    let cfg = small_model(scfg.vocab_size, scfg.n, scfg.m);
    let batch = MaskedBatch::new(&sets, 0.3, 0.5, cfg.vocab_size, 3).unwrap();
    let mut w = perturbed(&cfg, 3);
    let both = TrainConfig { msm_weight: 0.0, ..Default::default() };
    let losses = accumulate_gradients(&mut w, &batch, &both, 0).unwrap();
    assert!(losses.msm.is_none() && losses.mlm.is_some());
    let a = grads(&w);
    w.params.zero_grad();
    let mut tape = crate::numerics::Tape::new();
    let l = mlm_objective(&mut tape, &w, &batch, None).unwrap().unwrap();
    tape.backward(l, &mut w.params).unwrap();
    assert_eq!(a, grads(&w));
    for id in w.head_params() {
        assert!(w.params.get(id).grad().unwrap().iter().all(|&g| g == 0.0));
    }
}

#[test]
fn fresh_model_msm_loss_is_near_uniform() {
    let vocab = 404usize;
    let (n, m) = (9, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sets: Vec<SeqSet> = (0..8)
        .map(|u| {
            let raw: Vec<(f64, Vec<usize>)> = (0..m)
                .map(|i| {
                    let mut toks: Vec<usize> = (4..vocab).collect();
                    let mut picked = Vec::new();
                    while picked.len() < n - 1 {
                        let k = rng.gen_range(0..toks.len());
                        picked.push(toks.swap_remove(k));
                    }
                    (i as f64, picked)
                })
                .collect();
            SeqSet::from_sets(&format!("s{u}"), &raw, n, m).unwrap()
        })
        .collect();
    let cfg = small_model(vocab, n, m);
    let w = ModelWeights::<f64>::init(&cfg, Architecture::Nest).unwrap();
    let batch = MaskedBatch::new(&sets, 0.2, 0.5, vocab, 1).unwrap();
    let mut tape = crate::numerics::Tape::new();
    let l = msm_objective(&mut tape, &w, &batch, None).unwrap().unwrap();
    let expect = (vocab as f64 / (n - 1) as f64).ln();
    let got = tape.item(l);
    assert!((got - expect).abs() / expect < 0.05, "{got} vs {expect}");
}

#[test]
fn empty_batch_skips_the_update() {
    let (scfg, sets) = synthetic(2, 3);
    let cfg = small_model(scfg.vocab_size, scfg.n, scfg.m);
    let mut w = perturbed(&cfg, 4);
    let before = w.clone();
    let batch = MaskedBatch {
        subjects: sets.clone(),
        mlm: sets
            .iter()
            .map(|s| MlmView {
                tokens: s.token_ids.clone(),
                token_valid: s.token_valid.clone(),
                targets: s.token_ids.clone(),
                supervise: vec![false; s.token_ids.len()],
            })
            .collect(),
        msm: sets
            .iter()
            .map(|s| MsmView {
                tokens: s.token_ids.clone(),
                token_valid: s.token_valid.clone(),
                selected: vec![false; s.m],
                targets: vec![],
            })
            .collect(),
    };
    let mut state = OptimState::new(&w.params);
    let losses = pretrain_step(&mut w, &mut state, &batch, &TrainConfig::default(), 1e-3, 0).unwrap();
    assert!(losses.skipped());
    assert_eq!(state.step, 0);
    assert_eq!(w.params.iter().map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>(),
        before.params.iter().map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>());
}

#[test]
fn early_stopping_rule_trace() {
    let mut s = EarlyStopping::new(1);
    assert_eq!(s.update(1, 0.5), (true, false));
    assert_eq!(s.update(2, 0.4), (false, true));
    let mut s = EarlyStopping::new(2);
    assert_eq!(s.update(1, 0.1), (true, false));
    assert_eq!(s.update(2, 0.1), (false, false));
    assert_eq!(s.update(3, 0.2), (true, false));
    assert_eq!(s.update(4, 0.0), (false, false));
    assert_eq!(s.update(5, 0.0), (false, true));
    assert_eq!(s.best_epoch, Some(3));
}

#[test]
fn validation_is_deterministic_and_forces_a_masked_set() {
    let (scfg, sets) = synthetic(5, 4);
    let cfg = small_model(scfg.vocab_size, scfg.n, scfg.m);
    let w = ModelWeights::<f64>::init(&cfg, Architecture::Nest).unwrap();
    let opts = ValidationOptions { k: 10, decoder: crate::eval::SetDecoder::Tied, mlm_rate: 0.2, msm_rate: 0.4, seed: 9, batch_size: 2 };
    let a = validate_set_metrics(&w, &sets, &opts).unwrap();
    assert_eq!(a, validate_set_metrics(&w, &sets, &opts).unwrap());
    assert!((0.0..=1.0).contains(&a.recall) && (0.0..=1.0).contains(&a.ndcg));
    assert!(a.mlm_loss.is_some() && a.msm_loss.is_some());
    let rare = ValidationOptions { msm_rate: 1e-12, ..opts };
    let forced = validate_set_metrics(&w, &sets, &rare).unwrap();
    assert_eq!(forced.sets + forced.skipped, sets.len());
    let head = ValidationOptions { decoder: crate::eval::SetDecoder::MsmHead, ..opts };
    assert_eq!(validate_set_metrics(&w, &sets, &head).unwrap().msm_loss, a.msm_loss);
    assert!(matches!(validate_set_metrics(&w, &[], &opts), Err(NestError::Input(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (scfg, sets) = synthetic(4, 5);
    let cfg = small_model(scfg.vocab_size, scfg.n, scfg.m);
    let mut w = perturbed(&cfg, 6);
    let mut state = OptimState::new(&w.params);
    let tcfg = TrainConfig::default();
    let batch = MaskedBatch::new(&sets, 0.3, 0.5, cfg.vocab_size, 1).unwrap();
    pretrain_step(&mut w, &mut state, &batch, &tcfg, 1e-3, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let meta = serde_json::json!({"dataset": "abc"});
    save_checkpoint(dir.path(), &w, Some(&state), Some(&tcfg), meta.clone()).unwrap();
    let ck = load_checkpoint::<f64>(dir.path()).unwrap();
    assert_eq!(ck.metadata, meta);
    assert_eq!(ck.train, Some(tcfg));
    for ((na, a), (nb, b)) in w.params.iter().zip(ck.weights.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(ck.optim.unwrap(), state);
    assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(NestError::Checkpoint(_))));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = ModelConfig::tiny();
    let w = ModelWeights::<f64>::init(&cfg, Architecture::Nest).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &w, None, None, serde_json::Value::Null).unwrap();
    let manifest = dir.path().join(CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&manifest).unwrap();

    std::fs::write(&manifest, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(NestError::Checkpoint(_))));

    let mut m: Manifest = serde_json::from_str(&text).unwrap();
    m.model.d_ff += 1;
    std::fs::write(&manifest, serde_json::to_string(&m).unwrap()).unwrap();
    assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(NestError::Checkpoint(_))));

    std::fs::write(&manifest, &text).unwrap();
    let blob = dir.path().join(CHECKPOINT_BLOB);
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&blob, &bytes).unwrap();
    assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(NestError::Checkpoint(_))));
}

#[test]
fn resumed_training_reproduces_next_step() {
    let (scfg, sets) = synthetic(8, 6);
    let cfg = small_model(scfg.vocab_size, scfg.n, scfg.m);
    let tcfg = TrainConfig::default();
    let batches: Vec<MaskedBatch> = (0..4)
        .map(|i| MaskedBatch::new(&sets[2 * i..2 * i + 2], 0.3, 0.5, cfg.vocab_size, i as u64).unwrap())
        .collect();
    let mut w = ModelWeights::<f64>::init(&cfg, Architecture::Nest).unwrap();
    let mut state = OptimState::new(&w.params);
    let dir = tempfile::tempdir().unwrap();
    let mut straight = Vec::new();
    for (i, b) in batches.iter().enumerate() {
        if i == 2 {
            save_checkpoint(dir.path(), &w, Some(&state), Some(&tcfg), serde_json::Value::Null).unwrap();
        }
        straight.push(pretrain_step(&mut w, &mut state, b, &tcfg, 1e-3, i as u64).unwrap());
    }
    let ck = load_checkpoint::<f64>(dir.path()).unwrap();
    let (mut w2, mut s2) = (ck.weights, ck.optim.unwrap());
    for (i, b) in batches.iter().enumerate().skip(2) {
        assert_eq!(pretrain_step(&mut w2, &mut s2, b, &tcfg, 1e-3, i as u64).unwrap(), straight[i]);
    }
}

#[test]
fn fit_writes_metrics_and_best_checkpoint() {
    let (scfg, sets) = synthetic(24, 7);
    let cfg = small_model(scfg.vocab_size, scfg.n, scfg.m);
    let mut w = ModelWeights::<f64>::init(&cfg, Architecture::Nest).unwrap();
    let mut state = OptimState::new(&w.params);
    let tcfg = TrainConfig { epochs: 3, batch_size: 8, patience: 5, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let opts = FitOptions {
        out_dir: Some(dir.path().to_path_buf()),
        metadata: serde_json::json!({"k": 1}),
        preamble: vec!["run a\nseed 0".into()],
    };
    let report = fit(&mut w, &mut state, &sets[..20], &sets[20..], &tcfg, &opts).unwrap();
    assert_eq!(report.records.len(), 3);
    assert_eq!(report.steps, 9);
    assert_eq!(report.records.last().unwrap().step, 9);
    let csv = std::fs::read_to_string(dir.path().join(METRICS_CSV)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(&lines[..2], &["# run a", "# seed 0"]);
    assert_eq!(lines[2], "epoch,step,mlm_loss,msm_loss,recall_at_k,ndcg_at_k,seconds");
    assert_eq!(lines.len(), 6);
    assert_eq!(read_metrics(&dir.path().join(METRICS_CSV)).unwrap(), report.records);
    let ck = load_checkpoint::<f64>(dir.path()).unwrap();
    for ((_, a), (_, b)) in ck.weights.params.iter().zip(w.params.iter()) {
        assert_eq!(a.data(), b.data());
    }
    let best = report.best_epoch.unwrap();
    assert_abs_diff_eq!(report.best_ndcg, report.records[best - 1].ndcg_at_k);
}

#[test]
fn fit_is_deterministic() {
    let (scfg, sets) = synthetic(12, 8);
    let cfg = ModelConfig { dropout: 0.1, ..small_model(scfg.vocab_size, scfg.n, scfg.m) };
    let tcfg = TrainConfig { epochs: 2, batch_size: 4, ..Default::default() };
    let run = || {
        let mut w = ModelWeights::<f64>::init(&cfg, Architecture::Nest).unwrap();
        let mut state = OptimState::new(&w.params);
        let r = fit(&mut w, &mut state, &sets[..8], &sets[8..], &tcfg, &FitOptions::default()).unwrap();
        r.records.into_iter().map(|e| (e.mlm_loss, e.msm_loss, e.recall_at_k, e.ndcg_at_k)).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn seeds_are_distinct_across_streams() {
    let a = derive_seed(1, SeedStream::Masking, 0);
    assert_ne!(a, derive_seed(1, SeedStream::Dropout, 0));
    assert_ne!(a, derive_seed(1, SeedStream::Masking, 1));
    assert_ne!(a, derive_seed(2, SeedStream::Masking, 0));
    assert_eq!(a, derive_seed(1, SeedStream::Masking, 0));
}
