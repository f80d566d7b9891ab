//! Simulation run configuration.

use crate::cache::{CacheConfig, EvictCountMode, EvictionPolicy, WriteBackMode};
use crate::transmitter::{ChannelModel, TransferMode, DEFAULT_BUFFER_BYTES};
use crate::workload::{self, IdRemap, OnMalformed};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

/// Cache management policy of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Static-frequency LFU eviction with block transfers.
    #[default]
    FreqLfu,
    /// LFU on access counts gathered during the run.
    RuntimeLfu,
    /// Least recently used.
    Lru,
    /// Static-frequency LFU, one message per row.
    RowwiseTransfer,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::FreqLfu, Policy::RuntimeLfu, Policy::Lru, Policy::RowwiseTransfer];

    pub fn name(self) -> &'static str {
        match self {
            Policy::FreqLfu => "freq_lfu",
            Policy::RuntimeLfu => "runtime_lfu",
            Policy::Lru => "lru",
            Policy::RowwiseTransfer => "rowwise_transfer",
        }
    }

    pub fn eviction(self) -> EvictionPolicy {
        match self {
            Policy::FreqLfu | Policy::RowwiseTransfer => EvictionPolicy::StaticRank,
            Policy::RuntimeLfu => EvictionPolicy::RuntimeLfu,
            Policy::Lru => EvictionPolicy::Lru,
        }
    }

    pub fn transfer_mode(self) -> TransferMode {
        match self {
            Policy::RowwiseTransfer => TransferMode::RowWise,
            _ => TransferMode::Block,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown policy `{s}` (expected freq_lfu, runtime_lfu, lru or rowwise_transfer)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardStrategy {
    /// Every shard holds all rows, a slice of the columns.
    #[default]
    Column,
    /// Whole per-feature tables are assigned to shards.
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShardConfig {
    pub strategy: ShardStrategy,
    pub count: usize,
}

impl Default for ShardConfig {
    fn default() -> Self {
        Self { strategy: ShardStrategy::Column, count: 1 }
    }
}

/// Where batches come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceSource {
    /// A named skew preset over `num_ids` ids.
    Preset {
        name: String,
        /// Ids per sample; the preset's own count when absent.
        #[serde(default)]
        features: Option<usize>,
        num_batches: usize,
    },
    /// Zipf with an explicit exponent.
    Zipf { exponent: f64, features: usize, num_batches: usize },
    /// A trace CSV file.
    File {
        path: PathBuf,
        #[serde(default)]
        id_remap: IdRemap,
        #[serde(default)]
        feature_columns: Option<Vec<String>>,
        #[serde(default)]
        on_malformed: OnMalformed,
        /// Only the first this many batches are simulated.
        #[serde(default)]
        max_batches: Option<usize>,
    },
}

impl Default for TraceSource {
    fn default() -> Self {
        TraceSource::Preset { name: workload::CRITEO_LIKE.name.into(), features: None, num_batches: 100 }
    }
}

/// Everything a run depends on. Missing fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub trace: TraceSource,
    /// Id-space size of generated traces; for numeric CSV traces 0 means
    /// `max id + 1`.
    pub num_ids: u32,
    pub embedding_dim: usize,
    /// Fast-tier rows as a fraction of all rows.
    pub cache_ratio: f64,
    /// Samples per batch.
    pub batch_size: usize,
    pub policy: Policy,
    pub write_back: WriteBackMode,
    pub evict_count: EvictCountMode,
    /// Preload the hottest rows before the first batch.
    pub warmup: bool,
    /// Fraction of samples the frequency statistics are built from.
    pub stats_sample_rate: f64,
    pub shards: ShardConfig,
    pub channel: ChannelModel,
    pub buffer_bytes: u64,
    /// Leading fraction of batches excluded from steady-state numbers.
    pub steady_state_fraction: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            trace: TraceSource::default(),
            num_ids: 1_000_000,
            embedding_dim: 128,
            cache_ratio: 0.015,
            batch_size: 4096,
            policy: Policy::FreqLfu,
            write_back: WriteBackMode::DirtyOnly,
            evict_count: EvictCountMode::OccupancyAware,
            warmup: true,
            stats_sample_rate: 1.0,
            shards: ShardConfig::default(),
            channel: ChannelModel::default(),
            buffer_bytes: DEFAULT_BUFFER_BYTES,
            steady_state_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn cache_config(&self) -> CacheConfig {
        CacheConfig { policy: self.policy.eviction(), write_back: self.write_back, evict_count: self.evict_count }
    }

    /// Checks every field that can be checked without reading the trace.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.cache_ratio > 0.0 && self.cache_ratio <= 1.0) {
            return bad(format!("cache_ratio {} not in (0, 1]", self.cache_ratio));
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.stats_sample_rate > 0.0 && self.stats_sample_rate <= 1.0) {
            return bad(format!("stats_sample_rate {} not in (0, 1]", self.stats_sample_rate));
        }
        if !(0.0..1.0).contains(&self.steady_state_fraction) {
            return bad(format!("steady_state_fraction {} not in [0, 1)", self.steady_state_fraction));
        }
        if self.shards.count == 0 {
            return bad("shards.count must be >= 1".into());
        }
        if self.shards.strategy == ShardStrategy::Column && self.shards.count > self.embedding_dim {
            return bad(format!("{} column shards for embedding_dim {}", self.shards.count, self.embedding_dim));
        }
        if let Err(e) = self.channel.validate() {
            return bad(e.to_string());
        }
        let row_bytes = (self.embedding_dim * crate::store::ELEM_BYTES) as u64;
        if self.buffer_bytes < row_bytes {
            return bad(format!("buffer_bytes {} cannot hold one {row_bytes}-byte row", self.buffer_bytes));
        }
        match &self.trace {
            TraceSource::Preset { name, features, num_batches } => {
                if workload::preset(name).is_none() {
                    let known: Vec<&str> = workload::PRESETS.iter().map(|p| p.name).collect();
                    return bad(format!("unknown preset `{name}` (known: {})", known.join(", ")));
                }
                if *features == Some(0) {
                    return bad("trace.features must be >= 1".into());
                }
                if *num_batches == 0 {
                    return bad("trace.num_batches must be >= 1".into());
                }
                if self.num_ids == 0 {
                    return bad("num_ids must be >= 1".into());
                }
            }
            TraceSource::Zipf { exponent, features, num_batches } => {
                if !(exponent.is_finite() && *exponent > 0.0) {
                    return bad(format!("trace.exponent {exponent} must be finite and > 0"));
                }
                if *features == 0 || *num_batches == 0 {
                    return bad("trace.features and trace.num_batches must be >= 1".into());
                }
                if self.num_ids == 0 {
                    return bad("num_ids must be >= 1".into());
                }
            }
            TraceSource::File { max_batches, feature_columns, .. } => {
                if *max_batches == Some(0) {
                    return bad("trace.max_batches must be >= 1".into());
                }
                if feature_columns.as_ref().is_some_and(Vec::is_empty) {
                    return bad("trace.feature_columns must not be empty".into());
                }
            }
        }
        Ok(())
    }
}
