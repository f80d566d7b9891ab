//! Run metrics and their JSON, text and CSV renderings.

use crate::config::{Policy, SimConfig};
use crate::transmitter::TransferReport;
use crate::workload::Provenance;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write;

/// Version of the metrics JSON layout.
pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Accumulated transfers in one direction or phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferTotals {
    pub rows: u64,
    pub bytes: u64,
    pub messages: u64,
    pub modeled_time_s: f64,
    pub max_message_bytes: u64,
}

impl TransferTotals {
    pub fn add(&mut self, r: &TransferReport) {
        self.rows += r.rows;
        self.bytes += r.bytes;
        self.messages += r.messages;
        self.modeled_time_s += r.modeled_time_s;
        self.max_message_bytes = self.max_message_bytes.max(r.max_message_bytes);
    }

    pub fn merge(&mut self, o: &TransferTotals) {
        self.rows += o.rows;
        self.bytes += o.bytes;
        self.messages += o.messages;
        self.modeled_time_s += o.modeled_time_s;
        self.max_message_bytes = self.max_message_bytes.max(o.max_message_bytes);
    }
}

/// One batch, summed over shards. Hit and miss counts are per logical id:
/// column shards see the same ids, so shard 0's counts are reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub seq: u64,
    pub samples: usize,
    pub accesses: u64,
    pub unique_ids: u64,
    pub hits: u64,
    pub misses: u64,
    /// `hits / unique_ids`.
    pub hit_ratio: f64,
    /// Accesses whose row was resident before the batch.
    pub access_hits: u64,
    pub access_hit_ratio: f64,
    pub evictions: u64,
    pub rows_to_fast: u64,
    pub rows_to_slow: u64,
    pub bytes_to_fast: u64,
    pub bytes_to_slow: u64,
    pub messages: u64,
    /// Slowest shard's modeled transfer time.
    pub modeled_transfer_time_s: f64,
    pub max_message_bytes: u64,
    /// Elements moved towards the fast tier, all shards.
    pub elements_to_fast: u64,
    pub elements_to_slow: u64,
    /// `samples * features * embedding_dim`.
    pub element_bound: u64,
}

/// Fast-tier memory, split into its parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    /// Allocated fast-tier row storage: capacity × width × 4.
    pub fast_row_bytes: u64,
    /// Largest number of occupied rows times the row size.
    pub peak_occupied_row_bytes: u64,
    pub buffer_capacity_bytes: u64,
    pub buffer_peak_bytes: u64,
    /// Slot table, inverse index and policy bookkeeping.
    pub index_bytes: u64,
    /// `fast_row_bytes + buffer_peak_bytes + index_bytes`.
    pub peak_fast_tier_bytes: u64,
    /// `fast_row_bytes + buffer_capacity_bytes + index_bytes`.
    pub fast_tier_bound_bytes: u64,
    /// Every row held in the fast tier.
    pub full_residency_bytes: u64,
    /// `fast_row_bytes / full_residency_bytes`.
    pub row_storage_fraction: f64,
}

impl MemoryReport {
    pub fn merge(&mut self, o: &MemoryReport) {
        self.fast_row_bytes += o.fast_row_bytes;
        self.peak_occupied_row_bytes += o.peak_occupied_row_bytes;
        self.buffer_capacity_bytes += o.buffer_capacity_bytes;
        self.buffer_peak_bytes += o.buffer_peak_bytes;
        self.index_bytes += o.index_bytes;
        self.peak_fast_tier_bytes += o.peak_fast_tier_bytes;
        self.fast_tier_bound_bytes += o.fast_tier_bound_bytes;
        self.full_residency_bytes += o.full_residency_bytes;
        self.row_storage_fraction = ratio(self.fast_row_bytes, self.full_residency_bytes);
    }
}

pub const MEMORY_NOTE: &str = "embedding rows only; optimizer state, activations and other model memory are not modeled";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardMetrics {
    pub shard: usize,
    /// Column range `[start, end)` of the full embedding row.
    pub columns: [usize; 2],
    /// Table indices held (table strategy only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tables: Vec<usize>,
    pub rows: u64,
    pub capacity: u64,
    pub unique_ids: u64,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub warmup: TransferTotals,
    pub to_fast: TransferTotals,
    pub to_slow: TransferTotals,
    pub flush: TransferTotals,
    pub memory: MemoryReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceInfo {
    pub provenance: Provenance,
    pub num_ids: u32,
    pub features: usize,
    pub samples: u64,
    pub batches: u64,
    /// Per-feature tables the table strategy distributes.
    pub tables: usize,
    /// Share of accesses on the hottest 0.14% of ids in the frequency statistics.
    pub stats_head_coverage_0_14pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub batches: u64,
    /// First batch counted as steady state.
    pub steady_state_from_batch: u64,
    pub accesses: u64,
    pub unique_ids: u64,
    pub hits: u64,
    pub misses: u64,
    pub hit_ratio: f64,
    pub access_hit_ratio: f64,
    pub steady_state_hit_ratio: f64,
    pub steady_state_access_hit_ratio: f64,
    pub evictions: u64,
    pub rows_to_fast: u64,
    pub rows_to_slow: u64,
    pub bytes_to_fast: u64,
    pub bytes_to_slow: u64,
    pub messages: u64,
    pub modeled_transfer_time_s: f64,
    pub max_message_bytes: u64,
    /// Batches whose transfers exceeded `element_bound` in either direction.
    pub bound_violations: u64,
    /// Warm-up and final flush, all shards; not part of the per-batch sums.
    pub warmup: TransferTotals,
    pub flush: TransferTotals,
    pub memory: MemoryReport,
    pub memory_note: String,
}

/// Complete result of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: SimConfig,
    pub trace: TraceInfo,
    pub summary: Summary,
    pub shards: Vec<ShardMetrics>,
    pub batches: Vec<BatchMetrics>,
}

pub(crate) fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl RunMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    /// Internal consistency checks; returns one message per broken rule.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = Vec::new();
        let s = &self.summary;
        let sum = |f: fn(&BatchMetrics) -> u64| self.batches.iter().map(f).sum::<u64>();
        let pairs: [(&str, u64, u64); 10] = [
            ("accesses", s.accesses, sum(|b| b.accesses)),
            ("unique_ids", s.unique_ids, sum(|b| b.unique_ids)),
            ("hits", s.hits, sum(|b| b.hits)),
            ("misses", s.misses, sum(|b| b.misses)),
            ("evictions", s.evictions, sum(|b| b.evictions)),
            ("rows_to_fast", s.rows_to_fast, sum(|b| b.rows_to_fast)),
            ("rows_to_slow", s.rows_to_slow, sum(|b| b.rows_to_slow)),
            ("bytes_to_fast", s.bytes_to_fast, sum(|b| b.bytes_to_fast)),
            ("bytes_to_slow", s.bytes_to_slow, sum(|b| b.bytes_to_slow)),
            ("messages", s.messages, sum(|b| b.messages)),
        ];
        for (name, total, summed) in pairs {
            if total != summed {
                out.push(format!("cumulative {name} {total} != per-batch sum {summed}"));
            }
        }
        if s.batches != self.batches.len() as u64 {
            out.push(format!("summary counts {} batches, {} recorded", s.batches, self.batches.len()));
        }
        let time: f64 = self.batches.iter().map(|b| b.modeled_transfer_time_s).sum();
        if (time - s.modeled_transfer_time_s).abs() > 1e-9 * time.abs().max(1e-12) {
            out.push(format!("cumulative modeled time {} != per-batch sum {time}", s.modeled_transfer_time_s));
        }
        let mut ratios = vec![
            ("hit_ratio", s.hit_ratio),
            ("access_hit_ratio", s.access_hit_ratio),
            ("steady_state_hit_ratio", s.steady_state_hit_ratio),
        ];
        ratios.extend(self.batches.iter().map(|b| ("batch hit_ratio", b.hit_ratio)));
        for (name, r) in ratios {
            if !(0.0..=1.0).contains(&r) {
                out.push(format!("{name} {r} outside [0, 1]"));
            }
        }
        for b in &self.batches {
            if b.hits + b.misses != b.unique_ids {
                out.push(format!("batch {}: hits + misses != unique ids", b.seq));
            }
        }
        let always = self.config.write_back == crate::cache::WriteBackMode::Always;
        for sh in &self.shards {
            if sh.to_fast.rows != sh.misses {
                out.push(format!("shard {}: {} rows moved in for {} misses", sh.shard, sh.to_fast.rows, sh.misses));
            }
            if always && sh.to_slow.rows != sh.evictions || !always && sh.to_slow.rows > sh.evictions {
                out.push(format!("shard {}: {} rows written back for {} evictions", sh.shard, sh.to_slow.rows, sh.evictions));
            }
            if sh.memory.peak_fast_tier_bytes > sh.memory.fast_tier_bound_bytes {
                out.push(format!("shard {}: fast tier peak above its bound", sh.shard));
            }
        }
        out
    }

    /// Aligned human-readable summary. Not a stable format.
    pub fn to_text(&self) -> String {
        let s = &self.summary;
        let c = &self.config;
        let mut t = String::new();
        let _ = writeln!(t, "freqcache {}  policy {}  cache_ratio {}  dim {}  batch {}  shards {}x{:?}", self.tool_version, c.policy, c.cache_ratio, c.embedding_dim, c.batch_size, c.shards.count, c.shards.strategy);
        let _ = writeln!(t, "trace: {} ids, {} features, {} samples, {} batches", self.trace.num_ids, self.trace.features, self.trace.samples, self.trace.batches);
        let rows: Vec<(&str, String)> = vec![
            ("hit_ratio", format!("{:.6}", s.hit_ratio)),
            ("steady_state_hit_ratio", format!("{:.6} (from batch {})", s.steady_state_hit_ratio, s.steady_state_from_batch)),
            ("access_hit_ratio", format!("{:.6}", s.access_hit_ratio)),
            ("misses", s.misses.to_string()),
            ("evictions", s.evictions.to_string()),
            ("bytes_to_fast", s.bytes_to_fast.to_string()),
            ("bytes_to_slow", s.bytes_to_slow.to_string()),
            ("messages", s.messages.to_string()),
            ("modeled_transfer_time_s", format!("{:.6e}", s.modeled_transfer_time_s)),
            ("warmup_rows", s.warmup.rows.to_string()),
            ("peak_fast_tier_bytes", s.memory.peak_fast_tier_bytes.to_string()),
            ("  fast_row_bytes", s.memory.fast_row_bytes.to_string()),
            ("  buffer_peak_bytes", s.memory.buffer_peak_bytes.to_string()),
            ("  index_bytes", s.memory.index_bytes.to_string()),
            ("row_storage_fraction", format!("{:.6}", s.memory.row_storage_fraction)),
            ("bound_violations", s.bound_violations.to_string()),
        ];
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        for (k, v) in rows {
            let _ = writeln!(t, "  {k:<w$}  {v}");
        }
        if self.shards.len() > 1 {
            let header = ["shard", "columns", "rows", "capacity", "hits", "misses", "evictions", "bytes_to_fast", "bytes_to_slow"];
            let body: Vec<Vec<String>> = self
                .shards
                .iter()
                .map(|sh| {
                    vec![
                        sh.shard.to_string(),
                        format!("{}..{}", sh.columns[0], sh.columns[1]),
                        sh.rows.to_string(),
                        sh.capacity.to_string(),
                        sh.hits.to_string(),
                        sh.misses.to_string(),
                        sh.evictions.to_string(),
                        sh.to_fast.bytes.to_string(),
                        sh.to_slow.bytes.to_string(),
                    ]
                })
                .collect();
            t.push_str(&aligned_table(&header, &body));
        }
        t
    }
}

const BATCH_CSV_HEADER: [&str; 19] = [
    "seq",
    "samples",
    "accesses",
    "unique_ids",
    "hits",
    "misses",
    "hit_ratio",
    "access_hits",
    "access_hit_ratio",
    "evictions",
    "rows_to_fast",
    "rows_to_slow",
    "bytes_to_fast",
    "bytes_to_slow",
    "messages",
    "modeled_transfer_time_s",
    "max_message_bytes",
    "elements_to_fast",
    "elements_to_slow",
];

fn batch_record(b: &BatchMetrics) -> Vec<String> {
    vec![
        b.seq.to_string(),
        b.samples.to_string(),
        b.accesses.to_string(),
        b.unique_ids.to_string(),
        b.hits.to_string(),
        b.misses.to_string(),
        b.hit_ratio.to_string(),
        b.access_hits.to_string(),
        b.access_hit_ratio.to_string(),
        b.evictions.to_string(),
        b.rows_to_fast.to_string(),
        b.rows_to_slow.to_string(),
        b.bytes_to_fast.to_string(),
        b.bytes_to_slow.to_string(),
        b.messages.to_string(),
        b.modeled_transfer_time_s.to_string(),
        b.max_message_bytes.to_string(),
        b.elements_to_fast.to_string(),
        b.elements_to_slow.to_string(),
    ]
}

/// Per-batch CSV for plotting.
pub fn write_batches_csv<W: Write>(metrics: &RunMetrics, w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(BATCH_CSV_HEADER)?;
    for b in &metrics.batches {
        out.write_record(batch_record(b))?;
    }
    out.flush()?;
    Ok(())
}

/// One summary line per run, keyed by cache ratio and policy.
pub fn write_summary_csv<W: Write>(runs: &[&RunMetrics], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "cache_ratio",
        "policy",
        "batches",
        "hit_ratio",
        "steady_state_hit_ratio",
        "access_hit_ratio",
        "misses",
        "evictions",
        "bytes_to_fast",
        "bytes_to_slow",
        "messages",
        "modeled_transfer_time_s",
        "peak_fast_tier_bytes",
    ])?;
    for m in runs {
        let s = &m.summary;
        out.write_record([
            m.config.cache_ratio.to_string(),
            m.config.policy.to_string(),
            s.batches.to_string(),
            s.hit_ratio.to_string(),
            s.steady_state_hit_ratio.to_string(),
            s.access_hit_ratio.to_string(),
            s.misses.to_string(),
            s.evictions.to_string(),
            s.bytes_to_fast.to_string(),
            s.bytes_to_slow.to_string(),
            s.messages.to_string(),
            s.modeled_transfer_time_s.to_string(),
            s.memory.peak_fast_tier_bytes.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn aligned_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let mut t = String::new();
    let line = |t: &mut String, cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells.zip(&widths).map(|(c, &w)| format!("{c:>w$}")).collect();
        let _ = writeln!(t, "{}", parts.join("  ").trim_end());
    };
    line(&mut t, &mut header.iter().copied());
    for r in rows {
        line(&mut t, &mut r.iter().map(String::as_str));
    }
    t
}

/// One policy's headline numbers in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyResult {
    pub policy: Policy,
    pub hit_ratio: f64,
    pub steady_state_hit_ratio: f64,
    pub access_hit_ratio: f64,
    pub misses: u64,
    pub evictions: u64,
    pub bytes_moved: u64,
    pub messages: u64,
    pub modeled_transfer_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: SimConfig,
    pub results: Vec<PolicyResult>,
    /// Best first; ties keep the input order.
    pub by_hit_ratio: Vec<Policy>,
    pub by_transfer_time: Vec<Policy>,
}

impl ComparisonReport {
    pub fn from_runs(config: SimConfig, runs: &[RunMetrics]) -> Self {
        let results: Vec<PolicyResult> = runs
            .iter()
            .map(|m| {
                let s = &m.summary;
                PolicyResult {
                    policy: m.config.policy,
                    hit_ratio: s.hit_ratio,
                    steady_state_hit_ratio: s.steady_state_hit_ratio,
                    access_hit_ratio: s.access_hit_ratio,
                    misses: s.misses,
                    evictions: s.evictions,
                    bytes_moved: s.bytes_to_fast + s.bytes_to_slow,
                    messages: s.messages,
                    modeled_transfer_time_s: s.modeled_transfer_time_s,
                }
            })
            .collect();
        let mut by_hit: Vec<&PolicyResult> = results.iter().collect();
        by_hit.sort_by(|a, b| b.hit_ratio.total_cmp(&a.hit_ratio));
        let mut by_time: Vec<&PolicyResult> = results.iter().collect();
        by_time.sort_by(|a, b| a.modeled_transfer_time_s.total_cmp(&b.modeled_transfer_time_s));
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.into(),
            config,
            by_hit_ratio: by_hit.iter().map(|r| r.policy).collect(),
            by_transfer_time: by_time.iter().map(|r| r.policy).collect(),
            results,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Ranked by hit ratio.
    pub fn to_text(&self) -> String {
        let header = ["rank", "policy", "hit_ratio", "steady_state", "messages", "bytes_moved", "modeled_time_s", "time_rank"];
        let rows: Vec<Vec<String>> = self
            .by_hit_ratio
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let r = self.results.iter().find(|r| r.policy == *p).expect("ranked policy has a result");
                let time_rank = self.by_transfer_time.iter().position(|q| q == p).unwrap_or(0) + 1;
                vec![
                    (i + 1).to_string(),
                    p.to_string(),
                    format!("{:.6}", r.hit_ratio),
                    format!("{:.6}", r.steady_state_hit_ratio),
                    r.messages.to_string(),
                    r.bytes_moved.to_string(),
                    format!("{:.6e}", r.modeled_transfer_time_s),
                    time_rank.to_string(),
                ]
            })
            .collect();
        aligned_table(&header, &rows)
    }
}
