use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::seqset::{RawSet, RawSubject, SeqSet};
use crate::data::vocab::{is_special, Vocab, CLS, MASK, NUM_SPECIAL, PAD};
use crate::error::NestError;
use crate::model::{Architecture, ModelConfig, ModelWeights};
use crate::train::{fit, FitOptions, OptimState, TrainConfig};

fn model(vocab_size: usize, n: usize, m: usize) -> ModelConfig {
    ModelConfig { layers: 2, d_model: 16, d_ff: 32, n_heads: 2, d_k: 8, vocab_size, n, m, ..ModelConfig::tiny() }
}

fn random_subjects(count: usize, vocab: usize, n: usize, m: usize, seed: u64) -> Vec<SeqSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|u| {
            let sets: Vec<(f64, Vec<usize>)> = (0..m)
                .map(|i| (i as f64, (0..n - 1).map(|_| rng.gen_range(NUM_SPECIAL..vocab)).collect()))
                .collect();
            SeqSet::from_sets(&format!("u{u}"), &sets, n, m).unwrap()
        })
        .collect()
}

#[test]
fn full_vocabulary_top_k_is_always_right() {
    let cfg = model(30, 4, 3);
    let w = ModelWeights::<f64>::init(&cfg, Architecture::Nest).unwrap();
    let subjects = random_subjects(6, 30, 4, 3, 1);
    assert_eq!(masked_token_topk_accuracy(&w, &subjects, 26, 0.5, 0, 4).unwrap(), 1.0);
    assert!(matches!(masked_token_topk_accuracy(&w, &subjects, 27, 0.5, 0, 4), Err(NestError::Input(_))));
}

#[test]
fn random_model_accuracy_is_near_chance() {
    let vocab = 104;
    let cfg = model(vocab, 6, 4);
    let w = ModelWeights::<f64>::init(&cfg, Architecture::Nest).unwrap();
    let subjects = random_subjects(60, vocab, 6, 4, 2);
    let acc = masked_token_topk_accuracy(&w, &subjects, 10, 0.5, 3, 16).unwrap();
    let chance = 10.0 / (vocab - NUM_SPECIAL) as f64;
    assert!((acc - chance).abs() < 0.06, "{acc} vs {chance}");
}

#[test]
fn set_prediction_excludes_reserved_tokens_and_is_deterministic() {
    let cfg = model(20, 4, 3);
    let mut w = ModelWeights::<f64>::init(&cfg, Architecture::Nest).unwrap();
    // Make the reserved rows dominate the tied decoder.
    let d = cfg.d_model;
    for v in 0..NUM_SPECIAL {
        w.params.get_mut(w.embedding).data_mut()[v * d..(v + 1) * d].iter_mut().for_each(|x| *x *= 100.0);
    }
    let s = SeqSet::from_sets("x", &[(0.0, vec![4, 5]), (1.0, vec![6, 6, 7])], 4, 3).unwrap();
    for decoder in [SetDecoder::Tied, SetDecoder::MsmHead] {
        let r = tied_set_prediction(&w, &s, 1, 16, decoder).unwrap();
        assert!(r.predicted.iter().all(|&t| !is_special(t)));
        assert_eq!(r.truth, vec![6, 7]);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r, tied_set_prediction(&w, &s, 1, 16, decoder).unwrap());
    }
    assert!(matches!(tied_set_prediction(&w, &s, 2, 5, SetDecoder::Tied), Err(NestError::Input(_))));
}

#[test]
fn mask_set_covers_every_slot() {
    let s = SeqSet::from_sets("x", &[(0.0, vec![4]), (1.0, vec![6])], 4, 2).unwrap();
    let masked = mask_set(&s, 0).unwrap();
    assert_eq!(masked.row(0), &[CLS, MASK, MASK, MASK]);
    assert_eq!(masked.row(1), s.row(1));
    assert!(masked.token_valid[..4].iter().all(|&v| v));
}

#[test]
fn query_set_is_appended_at_the_median_gap() {
    let s = SeqSet::from_sets("x", &[(0.0, vec![4]), (1.0, vec![5]), (4.0, vec![6])], 4, 5).unwrap();
    assert_eq!(median_gap(&s), Some(2.0));
    let (q, idx) = append_query_set(&s, &NbrOptions::default()).unwrap();
    assert_eq!(idx, 3);
    assert_eq!(q.row(3), &[CLS, MASK, PAD, PAD]);
    assert_eq!(q.token_valid[12..16], [true, true, false, false]);
    assert_eq!(q.set_times[3], 6.0);
    assert!(q.set_valid[3] && !q.set_valid[4]);
    assert_eq!(&q.token_ids[..12], &s.token_ids[..12]);

    let single = SeqSet::from_sets("y", &[(2.0, vec![4])], 4, 3).unwrap();
    let opts = NbrOptions { fallback_gap: 0.5, query_masks: 2, ..Default::default() };
    let (q, idx) = append_query_set(&single, &opts).unwrap();
    assert_eq!((idx, q.set_times[1]), (1, 2.5));
    assert_eq!(q.row(1), &[CLS, MASK, MASK, PAD]);
}

#[test]
fn full_history_evicts_the_oldest_set() {
    let s = SeqSet::from_sets("x", &[(0.0, vec![4]), (1.0, vec![5, 7]), (3.0, vec![6])], 4, 3).unwrap();
    let (q, idx) = append_query_set(&s, &NbrOptions::default()).unwrap();
    assert_eq!(idx, 2);
    assert_eq!(q.row(0), s.row(1));
    assert_eq!(q.row(1), s.row(2));
    assert_eq!(q.set_times, vec![1.0, 3.0, 4.5]);
    assert_eq!(q.token_valid[..8], s.token_valid[4..12]);
    q.validate().unwrap();
}

#[test]
fn next_basket_errors() {
    let cfg = model(12, 4, 3);
    let w = ModelWeights::<f64>::init(&cfg, Architecture::Nest).unwrap();
    let s = SeqSet::from_sets("x", &[(0.0, vec![4])], 4, 3).unwrap();
    let too_many = NbrOptions { k: 9, ..Default::default() };
    assert!(matches!(predict_next_basket(&w, &s, &too_many), Err(NestError::Input(_))));
    let mut empty = s.clone();
    empty.set_valid = vec![false; 3];
    assert!(matches!(predict_next_basket(&w, &empty, &NbrOptions { k: 3, ..Default::default() }), Err(NestError::Input(_))));
    let ok = predict_next_basket(&w, &s, &NbrOptions { k: 8, ..Default::default() }).unwrap();
    let mut sorted = ok.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (4..12).collect::<Vec<_>>());
}

#[test]
fn nbr_example_holds_out_the_last_set() {
    let vocab = Vocab::from_tokens(["a", "b", "c"].map(String::from)).unwrap();
    let raw = RawSubject {
        subject_id: "u".into(),
        sets: vec![
            RawSet { t: 0.0, tokens: vec!["a".into()] },
            RawSet { t: 1.0, tokens: vec!["b".into(), "zzz".into(), "b".into()] },
        ],
    };
    let ex = nbr_example(&raw, &vocab, 4, 3).unwrap().unwrap();
    assert_eq!(ex.target, vec![vocab.encode("b")]);
    assert_eq!(ex.history.num_valid_sets(), 1);
    let one = RawSubject { subject_id: "v".into(), sets: raw.sets[..1].to_vec() };
    assert!(nbr_example(&one, &vocab, 4, 3).unwrap().is_none());
    assert_abs_diff_eq!(random_recall_baseline(10, 104), 0.1);
}

#[test]
fn overfit_model_recommends_the_repeated_item() {
    let (n, m, vocab) = (3, 4, 14);
    let subjects: Vec<SeqSet> = (0..40)
        .map(|u| {
            let item = NUM_SPECIAL + u % 10;
            let sets: Vec<(f64, Vec<usize>)> = (0..m).map(|i| (i as f64, vec![item])).collect();
            SeqSet::from_sets(&format!("u{u}"), &sets, n, m).unwrap()
        })
        .collect();
    let cfg = model(vocab, n, m);
    let mut w = ModelWeights::<f64>::init(&cfg, Architecture::Nest).unwrap();
    let mut state = OptimState::new(&w.params);
    let tcfg = TrainConfig { epochs: 200, batch_size: 8, lr: 3e-3, patience: 200, decoder: SetDecoder::MsmHead, ..Default::default() };
    fit(&mut w, &mut state, &subjects, &subjects[..10], &tcfg, &FitOptions::default()).unwrap();
    let mut correct = 0;
    for (u, s) in subjects.iter().enumerate().take(10) {
        let history = SeqSet::from_sets("h", &[(0.0, vec![s.row(0)[1]]), (1.0, vec![s.row(0)[1]])], n, m).unwrap();
        let top = predict_next_basket(&w, &history, &NbrOptions { k: 3, ..Default::default() }).unwrap();
        correct += usize::from(top[0] == NUM_SPECIAL + u % 10);
    }
    assert!(correct >= 9, "{correct}/10 ranked first");
}

#[test]
fn eval_outputs_round_trip() {
    let vocab = Vocab::from_tokens(["a", "b", "c"].map(String::from)).unwrap();
    let r = RankingResult::score(&[4, 5], vec![5, 6]).unwrap();
    let rec = EvalRecord::new("u1", &r, &vocab);
    assert_eq!(rec.topk, vec!["b", "c"]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eval.jsonl");
    write_records_jsonl(&path, std::slice::from_ref(&rec)).unwrap();
    let line = std::fs::read_to_string(&path).unwrap();
    assert_eq!(serde_json::from_str::<EvalRecord>(line.trim()).unwrap(), rec);
    let summary = MetricSummary::from_results([&r], 1);
    let csv = dir.path().join("eval.csv");
    write_summary_csv(&csv, 2, &[("nbr", &summary)]).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "name,k,count,skipped,recall_at_k,ndcg_at_k");
    assert!(text.lines().nth(1).unwrap().starts_with("nbr,2,1,1,0.5,"));
}
