use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::cost::{attention_memory_estimate, count_flops_per_token, count_params};
use crate::bench::throughput::Throughput;
use crate::error::{NestError, Result};
use crate::model::{Architecture, ModelConfig};

pub const FLOPS_CONVENTION: &str = "2 FLOPs per multiply-add; counts Q/K/V/O projections, QK^T scores, \
attention-weighted values, the three SwiGLU matrices and the tied vocabulary projection; softmax, norms, \
rotary and Time2Vec excluded; cross-set blocks amortized over the slots of a set";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: Architecture,
    pub convention: String,
    pub gflops_per_token: f64,
    pub param_count: u64,
    /// Score elements per layer per head for one subject.
    pub attention_score_elements: u64,
    pub attention_total_elements: u64,
    pub attention_class: String,
    pub throughput: Option<Throughput>,
    pub config: ModelConfig,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl CostReport {
    /// Analytic counts only; throughput is attached separately.
    pub fn analytic(config: &ModelConfig, arch: Architecture) -> Result<Self> {
        let memory = attention_memory_estimate(config, arch);
        Ok(CostReport {
            arch,
            convention: FLOPS_CONVENTION.into(),
            gflops_per_token: count_flops_per_token(config, arch)?,
            param_count: count_params(config, arch),
            attention_score_elements: memory.per_layer_head,
            attention_total_elements: memory.total,
            attention_class: memory.class,
            throughput: None,
            config: config.clone(),
            metadata: Default::default(),
        })
    }

    pub fn with_throughput(mut self, t: Throughput) -> Self {
        self.throughput = Some(t);
        self
    }

    pub fn write_json(reports: &[CostReport], path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(reports)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub arch: String,
    pub n: usize,
    pub m: usize,
    pub d_model: usize,
    pub gflops_per_token: f64,
    pub param_count: u64,
    pub attention_score_elements: u64,
}

/// Analytic costs over every `(n, m, d_model)` combination. Head width
/// follows `d_model / n_heads` and the FFN width keeps its ratio to `d_model`.
pub fn sweep(base: &ModelConfig, ns: &[usize], ms: &[usize], ds: &[usize]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &d in ds {
        if d % base.n_heads != 0 {
            return Err(NestError::Config(format!("d_model {d} is not divisible by {} heads", base.n_heads)));
        }
        for &n in ns {
            for &m in ms {
                let config = ModelConfig {
                    n,
                    m,
                    d_model: d,
                    d_k: d / base.n_heads,
                    d_ff: (base.d_ff * d).div_ceil(base.d_model),
                    ..base.clone()
                };
                for arch in [Architecture::Dense, Architecture::Nest] {
                    rows.push(SweepRow {
                        arch: arch.name().into(),
                        n,
                        m,
                        d_model: d,
                        gflops_per_token: count_flops_per_token(&config, arch)?,
                        param_count: count_params(&config, arch),
                        attention_score_elements: attention_memory_estimate(&config, arch).per_layer_head,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
