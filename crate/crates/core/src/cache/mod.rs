//! Inference with a bounded KV cache: retention-score eviction, baseline
//! policies, chunked prefill, eviction traces and an exhaustive oracle.

mod engine;
mod oracle;
mod policy;
mod store;
mod throughput;
mod trace;

pub use engine::{CompressionStats, DecodeOptions, Decoder, StepOutput};
pub use oracle::{
    oracle_optimal_eviction, random_instances, simulate_policy, HeadInstance, OracleResult, Simulation, ORACLE_MAX_D,
    ORACLE_MAX_M, ORACLE_MAX_T,
};
pub use policy::{trimkv_victim, Policy};
pub use store::{BoundedKVCache, HeadCache};
pub use throughput::{measure_throughput, median, step_time_profile, ThroughputConfig, ThroughputReport};
pub use trace::{EvictionTrace, TRACE_MAGIC};
