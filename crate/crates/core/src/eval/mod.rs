//! Set-retrieval metrics, masked-token accuracy, masked-set ranking, and
//! next-basket recommendation.

mod metrics;
mod output;
mod predict;

pub use metrics::{ndcg_at_k, recall_at_k, top_k, MetricSummary, RankingResult};
pub use output::{write_records_jsonl, write_summary_csv, EvalRecord};
pub use predict::{
    append_query_set, decoder_scores, mask_set, masked_token_topk_accuracy, median, median_gap, nbr_example,
    predict_next_basket, random_recall_baseline, tied_set_prediction, NbrExample, NbrOptions, SetDecoder,
};

#[cfg(test)]
mod tests;
