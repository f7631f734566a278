//! Analytic cost model and measured throughput of the two encoders.

mod cost;
mod report;
mod throughput;

pub use cost::{attention_memory_estimate, count_flops_per_token, count_params, flops_per_token, AttentionMemory};
pub use report::{sweep, write_sweep_csv, CostReport, SweepRow, FLOPS_CONVENTION};
pub use throughput::{measure_throughput, random_batch, Throughput, ThroughputOptions, MIN_TRIALS};
