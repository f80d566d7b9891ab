//! Trace-driven runs: warm-up, then per batch prepare, gather, synthetic
//! update and accounting, on every shard.

use crate::cache::{CacheError, CacheEvent, CacheStack};
use crate::config::{ConfigError, Policy, ShardStrategy, SimConfig, TraceSource};
use crate::freq_stats::{build_reorder, head_coverage, FreqError, FrequencyScanner, FrequencyTable, IdxMap};
use crate::ids::{RawId, RowIdx};
use crate::metrics::{
    ratio, BatchMetrics, ComparisonReport, MemoryReport, RunMetrics, ShardMetrics, Summary, TraceInfo, TransferTotals,
    MEMORY_NOTE, SCHEMA_VERSION, TOOL_VERSION,
};
use crate::par;
use crate::sharding::{greedy_table_plan, partition_columns, ShardError};
use crate::store::{fast_capacity, init_rows, init_slow_columns, FastTierStore, ReferenceStore, SlowTierStore, StoreError, ELEM_BYTES};
use crate::transmitter::{Direction, TransferError, TransferReport, Transmitter};
use crate::workload::{self, even_tables, CsvOptions, Provenance, Trace, WorkloadError, ZipfGenerator};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Freq(#[from] FreqError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error("warm-up on shard {shard}")]
    Warmup { shard: usize, source: CacheError },
    #[error("batch {batch}, shard {shard}")]
    Batch { batch: u64, shard: usize, source: CacheError },
    #[error("flush on shard {shard}")]
    Flush { shard: usize, source: CacheError },
    #[error("batch {batch}: column shard {shard} saw {got:?} (hits, misses, evictions), shard 0 saw {want:?}")]
    Asymmetric { batch: u64, shard: usize, got: (usize, usize, usize), want: (usize, usize, usize) },
}

impl SimError {
    /// Whether the error stems from the configuration rather than the run.
    pub fn is_config_error(&self) -> bool {
        matches!(self, SimError::Config(ConfigError::Invalid(_) | ConfigError::Parse { .. }))
    }
}

/// Seed substreams derived from the config seed.
pub mod streams {
    pub const TRACE: u64 = 1;
    pub const INIT: u64 = 2;
    pub const UPDATES: u64 = 3;
    pub const STATS: u64 = 4;
}

pub fn substream_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Synthetic per-(batch, id) update: `row[c] += scale(batch, id) * pattern[c]`.
#[derive(Debug, Clone)]
pub struct UpdateModel {
    seed: u64,
    pattern: Vec<f32>,
}

impl UpdateModel {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pattern = (0..dim).map(|_| 0.5 + (rng.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0)).collect();
        Self { seed, pattern }
    }

    pub fn scale(&self, batch: u64, id: RawId) -> f32 {
        let h = splitmix(self.seed ^ splitmix((batch << 32) | id.0 as u64));
        ((h >> 40) as f32 * (1.0 / 16_777_216.0) - 0.5) * 1e-2
    }

    /// Applies the update for columns `cols` of the full row to `row`.
    pub fn apply(&self, batch: u64, id: RawId, cols: Range<usize>, row: &mut [f32]) {
        let s = self.scale(batch, id);
        for (v, p) in row.iter_mut().zip(&self.pattern[cols]) {
            *v += s * p;
        }
    }
}

enum TraceData {
    Generated { gen: ZipfGenerator, samples: usize, provenance: Provenance },
    Loaded(Trace),
}

impl TraceData {
    fn num_ids(&self) -> u32 {
        match self {
            TraceData::Generated { gen, .. } => gen.num_ids(),
            TraceData::Loaded(t) => t.num_ids(),
        }
    }

    fn features(&self) -> usize {
        match self {
            TraceData::Generated { gen, .. } => gen.features(),
            TraceData::Loaded(t) => t.features(),
        }
    }

    fn samples(&self) -> usize {
        match self {
            TraceData::Generated { samples, .. } => *samples,
            TraceData::Loaded(t) => t.num_samples(),
        }
    }

    fn provenance(&self) -> Provenance {
        match self {
            TraceData::Generated { provenance, .. } => provenance.clone(),
            TraceData::Loaded(t) => t.provenance().clone(),
        }
    }

    fn tables(&self) -> Vec<Range<u32>> {
        match self {
            TraceData::Generated { gen, .. } => even_tables(gen.num_ids(), gen.features()),
            TraceData::Loaded(t) => t.tables(),
        }
    }

    /// Calls `f(seq, samples, ids)` for every batch in order.
    fn for_each_batch<E>(&self, batch_size: usize, mut f: impl FnMut(u64, usize, &[RawId]) -> Result<(), E>) -> Result<(), E> {
        match self {
            TraceData::Generated { gen, samples, .. } => {
                let mut stream = gen.stream(*samples);
                let mut buf = Vec::new();
                let mut seq = 0;
                while stream.next_batch(batch_size, &mut buf) {
                    f(seq, buf.len() / gen.features(), &buf)?;
                    seq += 1;
                }
                Ok(())
            }
            TraceData::Loaded(t) => {
                for b in t.batches(batch_size) {
                    f(b.seq, b.samples, b.ids)?;
                }
                Ok(())
            }
        }
    }

    fn into_trace(self) -> Trace {
        match self {
            TraceData::Generated { gen, samples, provenance } => {
                let t = gen.generate(samples);
                Trace::with_provenance(t.num_ids(), t.features(), t.ids().to_vec(), provenance).expect("generator output is valid")
            }
            TraceData::Loaded(t) => t,
        }
    }
}

fn open_trace(config: &SimConfig) -> Result<TraceData, SimError> {
    let trace_seed = substream_seed(config.seed, streams::TRACE);
    match &config.trace {
        TraceSource::Preset { name, features, num_batches } => {
            let p = workload::preset(name).ok_or_else(|| ConfigError::Invalid(format!("unknown preset `{name}`")))?;
            let gen = p.generator(config.num_ids, *features, trace_seed)?;
            let provenance = Provenance::Preset { name: name.clone(), exponent: gen.exponent(), seed: trace_seed };
            Ok(TraceData::Generated { samples: num_batches * config.batch_size, gen, provenance })
        }
        TraceSource::Zipf { exponent, features, num_batches } => {
            let gen = ZipfGenerator::new(config.num_ids, *exponent, *features, trace_seed)?;
            let provenance = Provenance::Zipf { exponent: *exponent, seed: trace_seed };
            Ok(TraceData::Generated { samples: num_batches * config.batch_size, gen, provenance })
        }
        TraceSource::File { path, id_remap, feature_columns, on_malformed, max_batches } => {
            let opts = CsvOptions {
                feature_columns: feature_columns.clone(),
                id_remap: *id_remap,
                on_malformed: *on_malformed,
                num_ids: (config.num_ids > 0 && *id_remap == workload::IdRemap::Numeric).then_some(config.num_ids),
            };
            let (mut trace, skipped) = workload::load_csv(path, &opts)?;
            if skipped > 0 {
                log::warn!("{}: skipped {skipped} malformed rows", path.display());
            }
            if let Some(m) = max_batches {
                let keep = (m * config.batch_size).min(trace.num_samples()) * trace.features();
                if keep < trace.ids().len() {
                    trace = trace.truncated(keep / trace.features().max(1));
                }
            }
            if trace.num_ids() == 0 || trace.num_samples() == 0 {
                return Err(ConfigError::Invalid(format!("trace {} holds no samples", path.display())).into());
            }
            Ok(TraceData::Loaded(trace))
        }
    }
}

/// The exact trace a run with `config` consumes.
pub fn materialize_trace(config: &SimConfig) -> Result<Trace, SimError> {
    config.validate()?;
    Ok(open_trace(config)?.into_trace())
}

fn build_stats(config: &SimConfig, data: &TraceData) -> Result<FrequencyTable, SimError> {
    let seed = substream_seed(config.seed, streams::STATS);
    if let TraceData::Loaded(t) = data {
        return Ok(crate::freq_stats::sample_frequencies(t, t.num_ids(), config.stats_sample_rate, seed)?);
    }
    let mut scanner = FrequencyScanner::new(data.num_ids(), data.features(), config.stats_sample_rate, seed)?;
    data.for_each_batch(config.batch_size, |_, _, ids| scanner.add_samples(ids))?;
    Ok(scanner.finish())
}

/// Frequency statistics a run with `config` builds its row order from.
pub fn run_statistics(config: &SimConfig) -> Result<FrequencyTable, SimError> {
    config.validate()?;
    build_stats(config, &open_trace(config)?)
}

struct Worker {
    shard: usize,
    stack: CacheStack,
    cols: Range<usize>,
    tables: Vec<usize>,
    // local id -> global id (table strategy)
    globals: Option<Vec<u32>>,
    reference: Option<ReferenceStore>,
    ids: Vec<RawId>,
    warmup: TransferTotals,
    to_fast: TransferTotals,
    to_slow: TransferTotals,
    flush: TransferTotals,
    hits: u64,
    misses: u64,
    unique: u64,
    evictions: u64,
    peak_occupied: usize,
    batch_rows: Vec<Vec<RowIdx>>,
    record_rows: bool,
}

struct StepOutcome {
    accesses: usize,
    unique: usize,
    access_hits: usize,
    hits: usize,
    misses: usize,
    evictions: usize,
    to_fast: TransferReport,
    to_slow: TransferReport,
}

impl Worker {
    fn global(&self, id: RawId) -> RawId {
        match &self.globals {
            Some(g) => RawId(g[id.index()]),
            None => id,
        }
    }

    fn step(&mut self, seq: u64, ids: &[RawId], upd: &UpdateModel) -> Result<StepOutcome, CacheError> {
        if self.record_rows {
            let mut rows: Vec<RowIdx> = ids.iter().map(|&id| self.stack.idx_map.rank_of(id)).collect();
            rows.sort_unstable();
            rows.dedup();
            self.batch_rows.push(rows);
        }
        let res = self.stack.prepare(ids)?;
        let unique: Vec<RawId> = res.slot_of.iter().map(|(id, _)| id).collect();
        let gathered = self.stack.gather(&res.slot_of, &unique)?;
        debug_assert_eq!(gathered.rows(), unique.len());

        let cols = self.cols.clone();
        let globals = self.globals.as_deref();
        let global = |id: RawId| globals.map_or(id, |g| RawId(g[id.index()]));
        self.stack.update_resident(&res.slot_of, |id, row| upd.apply(seq, global(id), cols.clone(), row))?;
        if let Some(reference) = self.reference.as_mut() {
            for &id in &unique {
                upd.apply(seq, global(id), cols.clone(), reference.row_mut(id));
            }
        }

        let pick = |d: Direction| {
            res.transfer_reports.iter().find(|r| r.direction == d).copied().unwrap_or_else(|| TransferReport::empty(d))
        };
        let out = StepOutcome {
            accesses: res.accesses,
            unique: res.unique_ids,
            access_hits: res.access_hits,
            hits: res.hits,
            misses: res.misses,
            evictions: res.evictions,
            to_fast: pick(Direction::ToFast),
            to_slow: pick(Direction::ToSlow),
        };
        self.to_fast.add(&out.to_fast);
        self.to_slow.add(&out.to_slow);
        self.hits += out.hits as u64;
        self.misses += out.misses as u64;
        self.unique += out.unique as u64;
        self.evictions += out.evictions as u64;
        self.peak_occupied = self.peak_occupied.max(self.stack.state.occupied());
        Ok(out)
    }

    fn memory(&self) -> MemoryReport {
        let width = self.cols.len() as u64;
        let row_bytes = width * ELEM_BYTES as u64;
        let fast_row_bytes = self.stack.fast.bytes() as u64;
        let buf = self.stack.tx.buffer();
        let index_bytes = self.stack.state.index_bytes() as u64;
        let full = self.stack.slow.len() as u64 * row_bytes;
        MemoryReport {
            fast_row_bytes,
            peak_occupied_row_bytes: self.peak_occupied as u64 * row_bytes,
            buffer_capacity_bytes: buf.capacity_bytes(),
            buffer_peak_bytes: buf.peak_bytes(),
            index_bytes,
            peak_fast_tier_bytes: fast_row_bytes + buf.peak_bytes() + index_bytes,
            fast_tier_bound_bytes: fast_row_bytes + buf.capacity_bytes() + index_bytes,
            full_residency_bytes: full,
            row_storage_fraction: ratio(fast_row_bytes, full),
        }
    }

    fn metrics(&self) -> ShardMetrics {
        ShardMetrics {
            shard: self.shard,
            columns: [self.cols.start, self.cols.end],
            tables: self.tables.clone(),
            rows: self.stack.slow.len() as u64,
            capacity: self.stack.state.capacity() as u64,
            unique_ids: self.unique,
            hits: self.hits,
            misses: self.misses,
            evictions: self.evictions,
            warmup: self.warmup,
            to_fast: self.to_fast,
            to_slow: self.to_slow,
            flush: self.flush,
            memory: self.memory(),
        }
    }
}

/// Knobs beyond the config that change what a run records or checks.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep every shard's cache event log and per-batch row sets.
    pub record_events: bool,
    /// Maintain a reference store and compare it with the slow tier after
    /// the final flush.
    pub verify: bool,
    /// Test hook: drop the dirty eviction write-back after this many.
    #[doc(hidden)]
    pub drop_writeback_after: Option<usize>,
}

/// First element where the slow tier and the reference store differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub shard: usize,
    pub raw_id: u32,
    pub column: usize,
    pub slow_value: f32,
    pub reference_value: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub pass: bool,
    pub rows_compared: u64,
    pub first_divergence: Option<Divergence>,
}

/// Everything a run produced.
#[derive(Debug)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub oracle: Option<OracleReport>,
    /// Per shard; empty unless events were recorded.
    pub events: Vec<Vec<CacheEvent>>,
    /// Per shard and batch: sorted unique rows referenced. Empty unless
    /// events were recorded.
    pub batch_rows: Vec<Vec<Vec<RowIdx>>>,
    pub capacities: Vec<usize>,
}

/// Shard layout for table sharding: every global id's shard and local id.
struct TableRouting {
    shard_of: Vec<u32>,
    local_of: Vec<u32>,
}

fn build_workers(
    config: &SimConfig,
    data: &TraceData,
    freq: &FrequencyTable,
    opts: &RunOptions,
) -> Result<(Vec<Worker>, Option<TableRouting>), SimError> {
    let dim = config.embedding_dim;
    let init_seed = substream_seed(config.seed, streams::INIT);
    let cache_cfg = config.cache_config();
    let mode = config.policy.transfer_mode();
    let make = |shard: usize,
                idx: Arc<IdxMap>,
                slow: SlowTierStore,
                cols: Range<usize>,
                tables: Vec<usize>,
                globals: Option<Vec<u32>>,
                reference: Option<ReferenceStore>|
     -> Result<Worker, SimError> {
        let rows = idx.len();
        let width = cols.len();
        let capacity = fast_capacity(rows as u32, config.cache_ratio);
        let tx = Transmitter::new(width, config.buffer_bytes, config.channel, mode)?;
        let mut stack = CacheStack::new(idx, slow, FastTierStore::zeros(capacity, width), cache_cfg, tx);
        if opts.record_events {
            stack.state.enable_event_log();
        }
        if let Some(n) = opts.drop_writeback_after {
            stack.state.inject_dropped_writeback(n);
        }
        Ok(Worker {
            shard,
            stack,
            cols,
            tables,
            globals,
            reference,
            ids: Vec::new(),
            warmup: TransferTotals::default(),
            to_fast: TransferTotals::default(),
            to_slow: TransferTotals::default(),
            flush: TransferTotals::default(),
            hits: 0,
            misses: 0,
            unique: 0,
            evictions: 0,
            peak_occupied: 0,
            batch_rows: Vec::new(),
            record_rows: opts.record_events,
        })
    };

    match config.shards.strategy {
        ShardStrategy::Column => {
            let idx = Arc::new(build_reorder(freq)?);
            let plan = partition_columns(dim, config.shards.count)?;
            let mut workers = Vec::with_capacity(plan.ranges.len());
            for (k, cols) in plan.ranges.iter().enumerate() {
                let slow = init_slow_columns(&idx, dim, cols.clone(), init_seed);
                let reference = opts.verify.then(|| ReferenceStore::init_columns(idx.len() as u32, dim, cols.clone(), init_seed));
                workers.push(make(k, idx.clone(), slow, cols.clone(), Vec::new(), None, reference)?);
            }
            Ok((workers, None))
        }
        ShardStrategy::Table => {
            let tables = data.tables();
            if config.shards.count > tables.len() {
                return Err(ConfigError::Invalid(format!("{} table shards for {} tables", config.shards.count, tables.len())).into());
            }
            let sizes: Vec<u64> = tables.iter().map(|t| t.len() as u64).collect();
            let plan = greedy_table_plan(&sizes, config.shards.count)?;
            let n = data.num_ids() as usize;
            let mut routing = TableRouting { shard_of: vec![0; n], local_of: vec![0; n] };
            let mut workers = Vec::with_capacity(plan.num_shards);
            for k in 0..plan.num_shards {
                let owned: Vec<usize> = (0..tables.len()).filter(|&t| plan.assignment[t] == k).collect();
                let globals: Vec<u32> = owned.iter().flat_map(|&t| tables[t].clone()).collect();
                if globals.is_empty() {
                    return Err(ConfigError::Invalid(format!("table shard {k} holds no rows")).into());
                }
                for (l, &g) in globals.iter().enumerate() {
                    routing.shard_of[g as usize] = k as u32;
                    routing.local_of[g as usize] = l as u32;
                }
                let local = FrequencyTable::from_pairs(
                    globals.len() as u32,
                    globals.iter().enumerate().map(|(l, &g)| (l as u32, freq.count(RawId(g)))),
                )?;
                let idx = Arc::new(build_reorder(&local)?);
                let slow = SlowTierStore::from_matrix(init_rows(globals.len(), dim, 0..dim, init_seed, |r| {
                    RawId(globals[idx.id_of(RowIdx(r as u32)).index()])
                }));
                let reference = opts
                    .verify
                    .then(|| ReferenceStore::from_matrix(init_rows(globals.len(), dim, 0..dim, init_seed, |l| RawId(globals[l]))));
                workers.push(make(k, idx, slow, 0..dim, owned, Some(globals), reference)?);
            }
            Ok((workers, Some(routing)))
        }
    }
}

/// Runs `config` and returns its metrics.
pub fn run(config: &SimConfig) -> Result<RunMetrics, SimError> {
    Ok(run_with(config, RunOptions::default())?.metrics)
}

/// Runs `config` with extra recording or verification.
pub fn run_with(config: &SimConfig, opts: RunOptions) -> Result<RunOutput, SimError> {
    config.validate()?;
    let data = open_trace(config)?;
    let freq = build_stats(config, &data)?;
    log::info!("frequency statistics: {} accesses, {} distinct ids", freq.total_accesses(), freq.observed_ids());
    let (mut workers, routing) = build_workers(config, &data, &freq, &opts)?;
    log::info!("{} shard(s) initialized", workers.len());
    let upd = UpdateModel::new(substream_seed(config.seed, streams::UPDATES), config.embedding_dim);
    let column = config.shards.strategy == ShardStrategy::Column;
    let features = data.features();
    let dim = config.embedding_dim as u64;

    if config.warmup {
        let results = par::map_mut(&mut workers, |w| {
            let k = w.stack.state.capacity();
            w.stack.warmup(k).map(|r| {
                w.warmup.add(&r);
                w.peak_occupied = w.stack.state.occupied();
            })
        });
        for (shard, r) in results.into_iter().enumerate() {
            r.map_err(|source| SimError::Warmup { shard, source })?;
        }
    }

    let total_batches = data.samples().div_ceil(config.batch_size) as u64;
    let steady_from = (config.steady_state_fraction * total_batches as f64).ceil() as u64;
    let mut batches: Vec<BatchMetrics> = Vec::with_capacity(total_batches as usize);

    data.for_each_batch(config.batch_size, |seq, samples, ids| -> Result<(), SimError> {
        let outcomes: Vec<Result<StepOutcome, CacheError>> = match &routing {
            None => par::map_mut(&mut workers, |w| w.step(seq, ids, &upd)),
            Some(rt) => {
                for w in workers.iter_mut() {
                    w.ids.clear();
                }
                for &id in ids {
                    if id.index() >= rt.shard_of.len() {
                        return Err(SimError::Batch {
                            batch: seq,
                            shard: 0,
                            source: CacheError::IdOutOfRange { id: id.0, num_ids: rt.shard_of.len() },
                        });
                    }
                    workers[rt.shard_of[id.index()] as usize].ids.push(RawId(rt.local_of[id.index()]));
                }
                par::map_mut(&mut workers, |w| {
                    let local = std::mem::take(&mut w.ids);
                    let r = w.step(seq, &local, &upd);
                    w.ids = local;
                    r
                })
            }
        };
        let mut outs = Vec::with_capacity(outcomes.len());
        for (shard, o) in outcomes.into_iter().enumerate() {
            outs.push(o.map_err(|source| SimError::Batch { batch: seq, shard, source })?);
        }
        if column {
            let key = |o: &StepOutcome| (o.hits, o.misses, o.evictions);
            for (shard, o) in outs.iter().enumerate().skip(1) {
                if key(o) != key(&outs[0]) {
                    return Err(SimError::Asymmetric { batch: seq, shard, got: key(o), want: key(&outs[0]) });
                }
            }
        }
        let logical: Vec<&StepOutcome> = if column { vec![&outs[0]] } else { outs.iter().collect() };
        let lsum = |f: fn(&StepOutcome) -> usize| logical.iter().map(|o| f(o) as u64).sum::<u64>();
        let width = |k: usize| workers[k].cols.len() as u64;
        let (accesses, unique, hits, misses, access_hits, evictions) = (
            lsum(|o| o.accesses),
            lsum(|o| o.unique),
            lsum(|o| o.hits),
            lsum(|o| o.misses),
            lsum(|o| o.access_hits),
            lsum(|o| o.evictions),
        );
        batches.push(BatchMetrics {
            seq,
            samples,
            accesses,
            unique_ids: unique,
            hits,
            misses,
            hit_ratio: ratio(hits, unique),
            access_hits,
            access_hit_ratio: ratio(access_hits, accesses),
            evictions,
            rows_to_fast: outs.iter().map(|o| o.to_fast.rows).sum(),
            rows_to_slow: outs.iter().map(|o| o.to_slow.rows).sum(),
            bytes_to_fast: outs.iter().map(|o| o.to_fast.bytes).sum(),
            bytes_to_slow: outs.iter().map(|o| o.to_slow.bytes).sum(),
            messages: outs.iter().map(|o| o.to_fast.messages + o.to_slow.messages).sum(),
            modeled_transfer_time_s: outs
                .iter()
                .map(|o| o.to_fast.modeled_time_s + o.to_slow.modeled_time_s)
                .fold(0.0, f64::max),
            max_message_bytes: outs
                .iter()
                .map(|o| o.to_fast.max_message_bytes.max(o.to_slow.max_message_bytes))
                .max()
                .unwrap_or(0),
            elements_to_fast: outs.iter().enumerate().map(|(k, o)| o.to_fast.rows * width(k)).sum(),
            elements_to_slow: outs.iter().enumerate().map(|(k, o)| o.to_slow.rows * width(k)).sum(),
            element_bound: samples as u64 * features as u64 * dim,
        });
        Ok(())
    })?;

    log::info!("{} batches done", batches.len());
    let flushes = par::map_mut(&mut workers, |w| w.stack.flush().map(|r| w.flush.add(&r)));
    for (shard, r) in flushes.into_iter().enumerate() {
        r.map_err(|source| SimError::Flush { shard, source })?;
    }

    let oracle = opts.verify.then(|| compare_with_reference(&workers));
    let shards: Vec<ShardMetrics> = workers.iter().map(Worker::metrics).collect();
    let summary = summarize(&batches, &shards, steady_from);
    let metrics = RunMetrics {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION.into(),
        config: config.clone(),
        trace: TraceInfo {
            provenance: data.provenance(),
            num_ids: data.num_ids(),
            features,
            samples: data.samples() as u64,
            batches: total_batches,
            tables: data.tables().len(),
            stats_head_coverage_0_14pct: head_coverage(&freq, 0.0014),
        },
        summary,
        shards,
        batches,
    };
    let capacities = workers.iter().map(|w| w.stack.state.capacity()).collect();
    let (events, batch_rows) = if opts.record_events {
        workers
            .iter_mut()
            .map(|w| (w.stack.state.take_events().unwrap_or_default(), std::mem::take(&mut w.batch_rows)))
            .unzip()
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(RunOutput { metrics, oracle, events, batch_rows, capacities })
}

fn summarize(batches: &[BatchMetrics], shards: &[ShardMetrics], steady_from: u64) -> Summary {
    let sum = |f: fn(&BatchMetrics) -> u64| batches.iter().map(f).sum::<u64>();
    let steady: Vec<&BatchMetrics> = batches.iter().filter(|b| b.seq >= steady_from).collect();
    let ssum = |f: fn(&BatchMetrics) -> u64| steady.iter().map(|b| f(b)).sum::<u64>();
    let mut warmup = TransferTotals::default();
    let mut flush = TransferTotals::default();
    let mut memory = MemoryReport::default();
    for sh in shards {
        warmup.merge(&sh.warmup);
        flush.merge(&sh.flush);
        memory.merge(&sh.memory);
    }
    Summary {
        batches: batches.len() as u64,
        steady_state_from_batch: steady_from,
        accesses: sum(|b| b.accesses),
        unique_ids: sum(|b| b.unique_ids),
        hits: sum(|b| b.hits),
        misses: sum(|b| b.misses),
        hit_ratio: ratio(sum(|b| b.hits), sum(|b| b.unique_ids)),
        access_hit_ratio: ratio(sum(|b| b.access_hits), sum(|b| b.accesses)),
        steady_state_hit_ratio: ratio(ssum(|b| b.hits), ssum(|b| b.unique_ids)),
        steady_state_access_hit_ratio: ratio(ssum(|b| b.access_hits), ssum(|b| b.accesses)),
        evictions: sum(|b| b.evictions),
        rows_to_fast: sum(|b| b.rows_to_fast),
        rows_to_slow: sum(|b| b.rows_to_slow),
        bytes_to_fast: sum(|b| b.bytes_to_fast),
        bytes_to_slow: sum(|b| b.bytes_to_slow),
        messages: sum(|b| b.messages),
        modeled_transfer_time_s: batches.iter().map(|b| b.modeled_transfer_time_s).sum(),
        max_message_bytes: batches.iter().map(|b| b.max_message_bytes).max().unwrap_or(0),
        bound_violations: batches
            .iter()
            .filter(|b| b.elements_to_fast > b.element_bound || b.elements_to_slow > b.element_bound)
            .count() as u64,
        warmup,
        flush,
        memory,
        memory_note: MEMORY_NOTE.into(),
    }
}

fn compare_with_reference(workers: &[Worker]) -> OracleReport {
    let mut rows_compared = 0u64;
    for w in workers {
        let Some(reference) = &w.reference else { continue };
        let idx = &w.stack.idx_map;
        for l in 0..idx.len() as u32 {
            let id = RawId(l);
            let slow = w.stack.slow.row(idx.rank_of(id));
            let want = reference.row(id);
            rows_compared += 1;
            if let Some(c) = (0..slow.len()).find(|&c| slow[c].to_bits() != want[c].to_bits()) {
                return OracleReport {
                    pass: false,
                    rows_compared,
                    first_divergence: Some(Divergence {
                        shard: w.shard,
                        raw_id: w.global(id).0,
                        column: w.cols.start + c,
                        slow_value: slow[c],
                        reference_value: want[c],
                    }),
                };
            }
        }
    }
    OracleReport { pass: true, rows_compared, first_divergence: None }
}

/// Replays `config` against a reference store and compares every row
/// bitwise after the final flush.
pub fn verify_against_oracle(config: &SimConfig) -> Result<(OracleReport, RunMetrics), SimError> {
    let out = run_with(config, RunOptions { verify: true, ..RunOptions::default() })?;
    Ok((out.oracle.expect("verification was requested"), out.metrics))
}

/// One run per cache ratio, same trace and seed.
pub fn sweep(config: &SimConfig, cache_ratios: &[f64]) -> Vec<Result<RunMetrics, SimError>> {
    cache_ratios
        .iter()
        .map(|&r| run(&SimConfig { cache_ratio: r, ..config.clone() }))
        .collect()
}

/// Runs every policy on the same trace and seed and ranks them.
pub fn compare_policies(config: &SimConfig, policies: &[Policy]) -> Result<ComparisonReport, SimError> {
    let runs = policies
        .iter()
        .map(|&p| run(&SimConfig { policy: p, ..config.clone() }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ComparisonReport::from_runs(config.clone(), &runs))
}
