//! Frequency-aware two-tier embedding cache.
//!
//! A full-size slow tier holds every embedding row ordered by access
//! frequency; a small fast tier caches the rows a batch needs. Rows move
//! between tiers in buffered block messages. Static ranks drive eviction.
//!
//! Build with `--no-default-features` to run every data-parallel path
//! sequentially.

pub mod cache;
pub mod config;
pub mod freq_stats;
pub mod ids;
pub mod metrics;
pub mod par;
pub mod sharding;
pub mod sim;
pub mod store;
pub mod transmitter;
pub mod workload;

pub use cache::{CacheConfig, CacheError, CacheStack, CacheState, EvictCountMode, EvictionPolicy, PrepareResult, WriteBackMode};
pub use config::{Policy, ShardConfig, ShardStrategy, SimConfig, TraceSource};
pub use freq_stats::{build_reorder, head_coverage, sample_frequencies, scan_frequencies, FrequencyTable, IdxMap};
pub use ids::{RawId, RowIdx, Slot};
pub use metrics::{ComparisonReport, RunMetrics};
pub use sim::{compare_policies, run, run_with, sweep, verify_against_oracle, RunOptions, RunOutput, SimError};
pub use store::{FastTierStore, ReferenceStore, RowMatrix, SlowTierStore};
pub use transmitter::{chunk_plan, ChannelModel, Direction, TransferMode, TransferReport, Transmitter};
pub use workload::Trace;
