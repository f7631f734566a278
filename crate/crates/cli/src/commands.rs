use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde_json::{json, Value};

use nest_core::bench::{measure_throughput, sweep, write_sweep_csv, CostReport};
use nest_core::data::{
    dataset_hash, encode_subjects, file_hash, generate_synthetic, ingest_instacart, read_dataset, split_of,
    write_dataset, RawSubject, Split, Vocab, NUM_SPECIAL,
};
use nest_core::eval::{
    nbr_example, predict_next_basket, random_recall_baseline, tied_set_prediction, MetricSummary, RankingResult,
};
use nest_core::model::Architecture;
use nest_core::train::{
    fit, load_checkpoint, validate_set_metrics, FitOptions, OptimState, ValidationOptions, METRICS_CSV,
};
use nest_core::{NestError, Weights32, Weights64};

use crate::config::{DataSource, RunConfig};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const REPORT_TXT: &str = "report.txt";
pub const COST_JSON: &str = "cost.json";
pub const SWEEP_CSV: &str = "sweep.csv";

/// A loaded dataset with its content hash.
pub struct Dataset {
    pub subjects: Vec<RawSubject>,
    pub hash: String,
}

pub fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    match cfg.source()? {
        DataSource::Synthetic => match cfg.path("data.path") {
            Some(path) => read_jsonl(&path),
            None => {
                let subjects = generate_synthetic(&cfg.synthetic_config()?)?.subjects;
                let hash = dataset_hash(&subjects)?;
                Ok(Dataset { subjects, hash })
            }
        },
        DataSource::Jsonl => {
            let path = cfg.path("data.path").context("data.path is required for a jsonl source")?;
            read_jsonl(&path)
        }
        DataSource::Instacart => {
            let orders = cfg.path("data.orders").context("data.orders is required for an instacart source")?;
            let products =
                cfg.path("data.order_products").context("data.order_products is required for an instacart source")?;
            let subjects = ingest_instacart(&orders, &products, cfg.get("data.sample_fraction")?)?;
            let hash = dataset_hash(&subjects)?;
            Ok(Dataset { subjects, hash })
        }
    }
}

fn read_jsonl(path: &Path) -> anyhow::Result<Dataset> {
    let subjects = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Dataset { subjects, hash: file_hash(path)? })
}

fn split(subjects: &[RawSubject], which: Split) -> Vec<RawSubject> {
    subjects.iter().filter(|s| split_of(&s.subject_id) == which).cloned().collect()
}

/// Header shared by every text artifact.
fn provenance(cfg: &RunConfig, command: &str, hash: Option<&str>) -> String {
    let mut out = format!("command: {command}\ndataset_hash: {}\n\n", hash.unwrap_or("none"));
    out.push_str(&cfg.echo());
    out
}

fn provenance_json(cfg: &RunConfig, hash: Option<&str>) -> Value {
    json!({ "config": cfg.echo(), "dataset_hash": hash })
}

fn write_report(out: &Path, cfg: &RunConfig, command: &str, hash: Option<&str>, body: &str) -> anyhow::Result<()> {
    let text = format!("{}\n{body}", provenance(cfg, command, hash));
    std::fs::write(out.join(REPORT_TXT), text)?;
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let data = load_dataset(cfg)?;
    write_dataset(&out.join(DATASET_FILE), &data.subjects)?;
    let sets: usize = data.subjects.iter().map(|s| s.sets.len()).sum();
    let body = format!("subjects: {}\nsets: {sets}\nfile: {DATASET_FILE}\n", data.subjects.len());
    write_report(out, cfg, "gen-data", Some(&data.hash), &body)?;
    println!("wrote {} subjects to {}", data.subjects.len(), out.join(DATASET_FILE).display());
    Ok(())
}

/// Fills `auto` sizes so every artifact records concrete values.
fn resolve_sizes(cfg: &mut RunConfig, vocab: Option<usize>) -> anyhow::Result<()> {
    let model = cfg.model_config(vocab)?;
    cfg.set("model.d_ff", model.d_ff.to_string())?;
    cfg.set("model.d_k", model.d_k.to_string())?;
    cfg.set("model.vocab_size", model.vocab_size.to_string())?;
    Ok(())
}

pub fn pretrain(cfg: &mut RunConfig, out: &Path) -> anyhow::Result<()> {
    cfg.threads()?;
    let data = load_dataset(cfg)?;
    let train_raw = split(&data.subjects, Split::Train);
    let valid_raw = split(&data.subjects, Split::Valid);
    if train_raw.is_empty() || valid_raw.is_empty() {
        bail!("dataset of {} subjects leaves an empty train or validation split", data.subjects.len());
    }
    let vocab = Vocab::build(
        train_raw.iter().flat_map(|s| s.sets.iter().flat_map(|t| t.tokens.iter())),
        cfg.get("data.min_count")?,
    )?;
    let explicit = (!cfg.vocab_is_auto()).then(|| cfg.get::<usize>("model.vocab_size")).transpose()?;
    if let Some(v) = explicit.filter(|&v| v < vocab.len()) {
        bail!("model.vocab_size = {v} is smaller than the {} entries of the training vocabulary", vocab.len());
    }
    resolve_sizes(cfg, Some(vocab.len()))?;
    let model = cfg.model_config(Some(vocab.len()))?;
    let train_cfg = cfg.train_config()?;
    let arch = cfg.arch()?;
    let train = encode_subjects(&train_raw, &vocab, model.n, model.m)?;
    let valid = encode_subjects(&valid_raw, &vocab, model.n, model.m)?;

    let mut weights = Weights64::init(&model, arch)?;
    let mut optim = OptimState::new(&weights.params);
    let mut metadata = provenance_json(cfg, Some(&data.hash));
    metadata["vocab"] = json!(vocab.tokens());
    let opts = FitOptions {
        out_dir: Some(out.to_path_buf()),
        metadata,
        preamble: provenance(cfg, "pretrain", Some(&data.hash)).lines().map(String::from).collect(),
    };
    let report = fit(&mut weights, &mut optim, &train, &valid, &train_cfg, &opts)?;

    let mut body = String::new();
    writeln!(body, "arch: {}", arch.name())?;
    writeln!(body, "train_subjects: {}\nvalid_subjects: {}", train.len(), valid.len())?;
    writeln!(body, "vocab_size: {}\nparameters: {}", model.vocab_size, weights.num_params())?;
    writeln!(body, "epochs_run: {}\nsteps: {}", report.records.len(), report.steps)?;
    writeln!(body, "skipped_steps: {}\nstopped_early: {}", report.skipped_steps, report.stopped_early)?;
    match report.best_epoch {
        Some(e) => writeln!(body, "best_epoch: {e}\nbest_ndcg_at_{}: {:.6}", train_cfg.val_k, report.best_ndcg)?,
        None => writeln!(body, "best_epoch: none")?,
    }
    writeln!(body, "metrics: {METRICS_CSV}")?;
    write_report(out, cfg, "pretrain", Some(&data.hash), &body)?;
    println!(
        "trained {} epochs; best epoch {:?} with NDCG@{} {:.4}",
        report.records.len(),
        report.best_epoch,
        train_cfg.val_k,
        report.best_ndcg
    );
    Ok(())
}

/// Weights and vocabulary of a pretraining run.
fn load_model(cfg: &RunConfig, out: &Path) -> anyhow::Result<(Weights64, Vocab, PathBuf)> {
    let dir = cfg.path("eval.checkpoint").unwrap_or_else(|| out.to_path_buf());
    let ck = load_checkpoint::<f64>(&dir).with_context(|| format!("loading checkpoint from {}", dir.display()))?;
    let tokens: Vec<String> = serde_json::from_value(ck.metadata.get("vocab").cloned().unwrap_or(Value::Null))
        .map_err(|_| NestError::Checkpoint("checkpoint metadata has no vocabulary".into()))?;
    let vocab = Vocab::from_tokens(tokens.into_iter().skip(NUM_SPECIAL))?;
    if vocab.len() > ck.weights.config.vocab_size {
        bail!("checkpoint vocabulary exceeds its embedding table");
    }
    Ok((ck.weights, vocab, dir))
}

fn summary_lines(name: &str, k: usize, s: &MetricSummary) -> String {
    format!(
        "{name}_count: {}\n{name}_skipped: {}\n{name}_recall_at_{k}: {:.6}\n{name}_ndcg_at_{k}: {:.6}\n",
        s.count, s.skipped, s.recall, s.ndcg
    )
}

pub fn eval_set(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let (weights, vocab, dir) = load_model(cfg, out)?;
    let data = load_dataset(cfg)?;
    let (n, m) = (weights.config.n, weights.config.m);
    let subjects = encode_subjects(&split(&data.subjects, cfg.split()?), &vocab, n, m)?;
    if subjects.is_empty() {
        bail!("evaluation split {} is empty", cfg.raw("eval.split"));
    }
    let opts = cfg.nbr_options()?;
    let (mut results, mut skipped) = (Vec::new(), 0);
    for s in &subjects {
        for set in (0..m).filter(|&i| s.set_valid[i]) {
            match tied_set_prediction(&weights, s, set, opts.k, opts.decoder) {
                Ok(r) => results.push(r),
                Err(NestError::UndefinedMetric(_)) => skipped += 1,
                Err(e) => return Err(e.into()),
            }
        }
    }
    let every_set = MetricSummary::from_results(&results, skipped);
    let train_cfg = cfg.train_config()?;
    let val_opts = ValidationOptions { k: opts.k, decoder: opts.decoder, ..ValidationOptions::from_train(&train_cfg) };
    let masked = validate_set_metrics(&weights, &subjects, &val_opts)?;

    let mut body = format!("checkpoint: {}\ndecoder: {}\nsubjects: {}\n", dir.display(), opts.decoder.name(), subjects.len());
    body.push_str(&summary_lines("every_set", opts.k, &every_set));
    writeln!(body, "masked_sets: {}\nmasked_skipped: {}", masked.sets, masked.skipped)?;
    writeln!(body, "masked_recall_at_{}: {:.6}\nmasked_ndcg_at_{}: {:.6}", opts.k, masked.recall, opts.k, masked.ndcg)?;
    if let Some(l) = masked.mlm_loss {
        writeln!(body, "mlm_loss: {l:.6}")?;
    }
    if let Some(l) = masked.msm_loss {
        writeln!(body, "msm_loss: {l:.6}")?;
    }
    write_report(out, cfg, "eval-set", Some(&data.hash), &body)?;
    println!("Recall@{k} {:.4}  NDCG@{k} {:.4} over {} sets", every_set.recall, every_set.ndcg, every_set.count, k = opts.k);
    Ok(())
}

/// Next-basket scores over the configured split.
pub struct NbrRun {
    pub summary: MetricSummary,
    pub random: f64,
}

pub fn run_nbr(weights: &Weights64, vocab: &Vocab, subjects: &[RawSubject], cfg: &RunConfig) -> anyhow::Result<NbrRun> {
    let opts = cfg.nbr_options()?;
    let (n, m) = (weights.config.n, weights.config.m);
    let (mut results, mut skipped): (Vec<RankingResult>, usize) = (Vec::new(), 0);
    for raw in subjects {
        let Some(ex) = nbr_example(raw, vocab, n, m)? else {
            skipped += 1;
            continue;
        };
        let predicted = predict_next_basket(weights, &ex.history, &opts)?;
        results.push(RankingResult::score(&ex.target, predicted)?);
    }
    Ok(NbrRun {
        summary: MetricSummary::from_results(&results, skipped),
        random: random_recall_baseline(opts.k, weights.config.vocab_size),
    })
}

pub fn nbr(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let (weights, vocab, dir) = load_model(cfg, out)?;
    let data = load_dataset(cfg)?;
    let subjects = split(&data.subjects, cfg.split()?);
    let run = run_nbr(&weights, &vocab, &subjects, cfg)?;
    if run.summary.count == 0 {
        bail!("no subject in split {} has a history and a target basket", cfg.raw("eval.split"));
    }
    let k: usize = cfg.get("eval.k")?;
    let mut body = format!("checkpoint: {}\ndecoder: {}\n", dir.display(), cfg.raw("eval.decoder"));
    body.push_str(&summary_lines("nbr", k, &run.summary));
    writeln!(body, "random_recall_at_{k}: {:.6}\nlift: {:.3}", run.random, run.summary.recall / run.random)?;
    write_report(out, cfg, "nbr", Some(&data.hash), &body)?;
    println!(
        "NBR Recall@{k} {:.4} (random {:.4}), NDCG@{k} {:.4} over {} subjects",
        run.summary.recall, run.random, run.summary.ndcg, run.summary.count
    );
    Ok(())
}

pub fn bench(cfg: &mut RunConfig, out: &Path) -> anyhow::Result<()> {
    cfg.threads()?;
    resolve_sizes(cfg, None)?;
    let model = cfg.model_config(None)?;
    let measure: bool = cfg.get("bench.throughput")?;
    let topts = cfg.throughput_options()?;
    let mut reports = Vec::new();
    for arch in [Architecture::Dense, Architecture::Nest] {
        let mut report = CostReport::analytic(&model, arch)?;
        if measure {
            let mut w = Weights32::init(&model, arch)?;
            report = report.with_throughput(measure_throughput(&mut w, &topts)?);
        }
        reports.push(report);
    }
    let doc = json!({ "provenance": provenance_json(cfg, None), "reports": reports });
    std::fs::write(out.join(COST_JSON), serde_json::to_string_pretty(&doc)?)?;

    let (ns, ms, ds) = (cfg.list("bench.sweep_n")?, cfg.list("bench.sweep_m")?, cfg.list("bench.sweep_d")?);
    let swept = !(ns.is_empty() && ms.is_empty() && ds.is_empty());
    if swept {
        let or = |v: Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v };
        let rows = sweep(&model, &or(ns, model.n), &or(ms, model.m), &or(ds, model.d_model))?;
        let path = out.join(SWEEP_CSV);
        write_sweep_csv(&path, &rows)?;
        let comments: String = provenance(cfg, "bench", None).lines().map(|l| format!("# {l}\n")).collect();
        let table = std::fs::read_to_string(&path)?;
        std::fs::write(&path, comments + &table)?;
    }

    let mut body = format!("convention: {}\n", reports[0].convention);
    for r in &reports {
        let name = r.arch.name();
        writeln!(body, "{name}_gflops_per_token: {:.6}", r.gflops_per_token)?;
        writeln!(body, "{name}_param_count: {}", r.param_count)?;
        writeln!(body, "{name}_attention_score_elements: {} ({})", r.attention_score_elements, r.attention_class)?;
        if let Some(t) = &r.throughput {
            writeln!(body, "{name}_tokens_per_second: {:.1} +- {:.1} over {} trials", t.mean, t.std, t.trials)?;
        }
    }
    let ratio = reports[1].gflops_per_token / reports[0].gflops_per_token;
    writeln!(body, "flops_reduction: {:.2}%", 100.0 * (1.0 - ratio))?;
    if let (Some(d), Some(n)) = (&reports[0].throughput, &reports[1].throughput) {
        writeln!(body, "throughput_speedup: {:.3}", n.mean / d.mean)?;
    }
    if swept {
        writeln!(body, "sweep: {SWEEP_CSV}")?;
    }
    write_report(out, cfg, "bench", None, &body)?;
    print!("{body}");
    Ok(())
}
