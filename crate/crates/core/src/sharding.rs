//! Splitting the cached table across workers.
//!
//! Column-wise sharding gives every worker all rows for a slice of the
//! embedding dimension, so every worker makes the same cache decisions on
//! the same batch. Table-wise sharding (the planner baseline) assigns whole
//! tables to workers and is prone to memory imbalance. Communication is
//! accounted, not performed.

use crate::cache::{CacheConfig, CacheError, CacheStack, PrepareResult};
use crate::freq_stats::IdxMap;
use crate::ids::RawId;
use crate::par;
use crate::store::{fast_capacity, init_slow_columns, FastTierStore, RowMatrix, StoreError, ELEM_BYTES};
use crate::transmitter::{ChannelModel, TransferError, TransferMode, Transmitter};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("cannot split {dim} columns into {shards} shards")]
    InvalidShardCount { shards: usize, dim: usize },
    #[error("shard {shard}: {source}")]
    Cache {
        shard: usize,
        #[source]
        source: CacheError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error("shards diverged: {0}")]
    Divergence(String),
}

/// Contiguous, near-equal column ranges covering `[0, embedding_dim)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnShardPlan {
    pub embedding_dim: usize,
    pub ranges: Vec<Range<usize>>,
}

impl ColumnShardPlan {
    pub fn num_shards(&self) -> usize {
        self.ranges.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }
}

pub fn partition_columns(embedding_dim: usize, num_shards: usize) -> Result<ColumnShardPlan, ShardError> {
    if num_shards == 0 || num_shards > embedding_dim {
        return Err(ShardError::InvalidShardCount { shards: num_shards, dim: embedding_dim });
    }
    let base = embedding_dim / num_shards;
    let extra = embedding_dim % num_shards;
    let mut ranges = Vec::with_capacity(num_shards);
    let mut start = 0;
    for s in 0..num_shards {
        let w = base + usize::from(s < extra);
        ranges.push(start..start + w);
        start += w;
    }
    Ok(ColumnShardPlan { embedding_dim, ranges })
}

/// Whole tables assigned to shards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableShardPlan {
    pub num_shards: usize,
    /// Rows per table.
    pub table_sizes: Vec<u64>,
    /// Shard of each table.
    pub assignment: Vec<usize>,
}

/// Largest table first onto the currently lightest shard (lowest index on ties).
pub fn greedy_table_plan(table_sizes: &[u64], num_shards: usize) -> Result<TableShardPlan, ShardError> {
    if num_shards == 0 {
        return Err(ShardError::InvalidShardCount { shards: 0, dim: 0 });
    }
    let mut order: Vec<usize> = (0..table_sizes.len()).collect();
    order.sort_by_key(|&t| (std::cmp::Reverse(table_sizes[t]), t));
    let mut load = vec![0u64; num_shards];
    let mut assignment = vec![0usize; table_sizes.len()];
    for t in order {
        let (s, _) = load.iter().enumerate().min_by_key(|&(i, &l)| (l, i)).unwrap();
        assignment[t] = s;
        load[s] += table_sizes[t];
    }
    Ok(TableShardPlan { num_shards, table_sizes: table_sizes.to_vec(), assignment })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub per_shard: Vec<u64>,
    pub max: u64,
    pub mean: f64,
    /// `max / mean`; 1.0 is perfectly balanced.
    pub imbalance_ratio: f64,
}

impl LoadStats {
    fn from_loads(per_shard: Vec<u64>) -> Self {
        let max = per_shard.iter().copied().max().unwrap_or(0);
        let total: u64 = per_shard.iter().sum();
        let mean = if per_shard.is_empty() { 0.0 } else { total as f64 / per_shard.len() as f64 };
        let imbalance_ratio = if mean > 0.0 { max as f64 / mean } else { 1.0 };
        Self { per_shard, max, mean, imbalance_ratio }
    }
}

/// Rows held per shard under a table-wise plan.
pub fn tablewise_imbalance(plan: &TableShardPlan) -> LoadStats {
    let mut load = vec![0u64; plan.num_shards];
    for (t, &s) in plan.assignment.iter().enumerate() {
        load[s] += plan.table_sizes[t];
    }
    LoadStats::from_loads(load)
}

/// Elements held per shard when `total_rows` rows are split by columns.
pub fn columnwise_imbalance(plan: &ColumnShardPlan, total_rows: u64) -> LoadStats {
    LoadStats::from_loads(plan.ranges.iter().map(|r| r.len() as u64 * total_rows).collect())
}

/// Activation exchange when switching from column-sharded embedding output
/// to batch-sharded dense compute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllToAllReport {
    pub num_shards: usize,
    /// `pair_bytes[src][dst]`; the diagonal stays local and is zero.
    pub pair_bytes: Vec<Vec<u64>>,
    pub total_bytes: u64,
}

/// Shard `i` holds columns `width_i` of the whole batch and sends shard `j`
/// the rows of `j`'s batch slice: `batch_j * width_i * 4` bytes.
pub fn alltoall_volume(batch_size: usize, embedding_dim: usize, num_shards: usize) -> Result<AllToAllReport, ShardError> {
    let cols = partition_columns(embedding_dim, num_shards)?;
    let rows: Vec<u64> = (0..num_shards)
        .map(|j| (batch_size / num_shards + usize::from(j < batch_size % num_shards)) as u64)
        .collect();
    let mut pair_bytes = vec![vec![0u64; num_shards]; num_shards];
    let mut total = 0;
    for (i, range) in cols.ranges.iter().enumerate() {
        for (j, &r) in rows.iter().enumerate() {
            if i != j {
                let b = r * range.len() as u64 * ELEM_BYTES as u64;
                pair_bytes[i][j] = b;
                total += b;
            }
        }
    }
    Ok(AllToAllReport { num_shards, pair_bytes, total_bytes: total })
}

/// Construction parameters shared by every shard's cache.
#[derive(Debug, Clone, Copy)]
pub struct ShardCacheParams {
    pub cache_ratio: f64,
    pub cache: CacheConfig,
    pub buffer_bytes: u64,
    pub channel: ChannelModel,
    pub transfer_mode: TransferMode,
    pub init_seed: u64,
}

/// Column-sharded cache: one full cache stack per column slice.
#[derive(Debug)]
pub struct ColumnShardedCache {
    plan: ColumnShardPlan,
    stacks: Vec<CacheStack>,
}

impl ColumnShardedCache {
    pub fn new(idx_map: Arc<IdxMap>, plan: ColumnShardPlan, params: &ShardCacheParams) -> Result<Self, ShardError> {
        let capacity = fast_capacity(idx_map.len() as u32, params.cache_ratio);
        let dim = plan.embedding_dim;
        let stacks = par::map(&plan.ranges, |range| -> Result<CacheStack, ShardError> {
            let slow = init_slow_columns(&idx_map, dim, range.clone(), params.init_seed);
            let fast = FastTierStore::zeros(capacity, range.len());
            let tx = Transmitter::new(range.len(), params.buffer_bytes, params.channel, params.transfer_mode)?;
            Ok(CacheStack::new(idx_map.clone(), slow, fast, params.cache, tx))
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { plan, stacks })
    }

    pub fn plan(&self) -> &ColumnShardPlan {
        &self.plan
    }

    pub fn stacks(&self) -> &[CacheStack] {
        &self.stacks
    }

    pub fn stacks_mut(&mut self) -> &mut [CacheStack] {
        &mut self.stacks
    }

    /// Runs `f` on every shard (in parallel when enabled), tagging errors
    /// with the shard index.
    pub fn each<R: Send>(
        &mut self,
        f: impl Fn(&mut CacheStack) -> Result<R, CacheError> + Sync + Send,
    ) -> Result<Vec<R>, ShardError> {
        let mut indexed: Vec<(usize, &mut CacheStack)> = self.stacks.iter_mut().enumerate().collect();
        par::map_mut(&mut indexed, |(i, s)| f(s).map_err(|source| ShardError::Cache { shard: *i, source }))
            .into_iter()
            .collect()
    }

    pub fn warmup(&mut self, k: usize) -> Result<(), ShardError> {
        self.each(|s| s.warmup(k)).map(|_| ())
    }

    pub fn prepare(&mut self, ids: &[RawId]) -> Result<Vec<PrepareResult>, ShardError> {
        let results = self.each(|s| s.prepare(ids))?;
        check_symmetric(&results)?;
        Ok(results)
    }

    /// Prepares `ids` on every shard and concatenates the per-shard gathers
    /// along the column axis.
    pub fn lookup(&mut self, ids: &[RawId]) -> Result<(RowMatrix, Vec<PrepareResult>), ShardError> {
        let results = self.prepare(ids)?;
        let parts = self
            .stacks
            .iter()
            .zip(&results)
            .enumerate()
            .map(|(i, (s, r))| s.gather(&r.slot_of, ids).map_err(|source| ShardError::Cache { shard: i, source }))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((RowMatrix::concat_columns(&parts)?, results))
    }

    pub fn flush(&mut self) -> Result<(), ShardError> {
        self.each(|s| s.flush()).map(|_| ())
    }

    /// Full-width slow tier, reassembled from the shards.
    pub fn slow_tier(&self) -> Result<RowMatrix, ShardError> {
        let parts: Vec<RowMatrix> = self.stacks.iter().map(|s| s.slow.matrix().clone()).collect();
        Ok(RowMatrix::concat_columns(&parts)?)
    }
}

/// Same ids, same ranks and the same capacity must give every shard the
/// same hit/miss/eviction counts.
fn check_symmetric(results: &[PrepareResult]) -> Result<(), ShardError> {
    if let Some(first) = results.first() {
        for (i, r) in results.iter().enumerate().skip(1) {
            if (r.hits, r.misses, r.evictions) != (first.hits, first.misses, first.evictions) {
                return Err(ShardError::Divergence(format!(
                    "shard {i} hits/misses/evictions {:?} vs shard 0 {:?}",
                    (r.hits, r.misses, r.evictions),
                    (first.hits, first.misses, first.evictions)
                )));
            }
        }
    }
    Ok(())
}

/// Prepares and gathers `batch` through every column shard; the result has
/// full embedding width.
pub fn sharded_lookup(cache: &mut ColumnShardedCache, batch: &[RawId]) -> Result<RowMatrix, ShardError> {
    cache.lookup(batch).map(|(m, _)| m)
}
