use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::vocab::{Vocab, SPECIAL_TOKENS, UNK};
use crate::error::Result;
use crate::eval::metrics::{MetricSummary, RankingResult};

/// One subject's line of the evaluation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub subject_id: String,
    pub recall: f64,
    pub ndcg: f64,
    pub topk: Vec<String>,
}

impl EvalRecord {
    pub fn new(subject_id: &str, result: &RankingResult, vocab: &Vocab) -> Self {
        EvalRecord {
            subject_id: subject_id.to_string(),
            recall: result.recall,
            ndcg: result.ndcg,
            topk: result.predicted.iter().map(|&id| vocab.decode(id).unwrap_or(SPECIAL_TOKENS[UNK]).to_string()).collect(),
        }
    }
}

pub fn write_records_jsonl(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    name: &'a str,
    k: usize,
    count: usize,
    skipped: usize,
    recall_at_k: f64,
    ndcg_at_k: f64,
}

/// Aggregate CSV: one row per named summary.
pub fn write_summary_csv(path: &Path, k: usize, rows: &[(&str, &MetricSummary)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (name, s) in rows {
        w.serialize(SummaryRow {
            name,
            k,
            count: s.count,
            skipped: s.skipped,
            recall_at_k: s.recall,
            ndcg_at_k: s.ndcg,
        })?;
    }
    w.flush()?;
    Ok(())
}
