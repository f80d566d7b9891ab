//! Id streams that drive the cache: seeded skewed generators calibrated to a
//! head-coverage target, and CSV ingestion for click-log-shaped files.

use crate::ids::RawId;
use crate::par;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::ops::Range;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("column `{0}` not present in header")]
    MissingColumn(String),
    #[error("line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("id {id} out of range for {num_ids} ids")]
    IdOutOfRange { id: u64, num_ids: u32 },
    #[error("trace holds {len} ids which is not a multiple of {features} features")]
    ShapeMismatch { len: usize, features: usize },
}

/// Where a trace came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Zipf { exponent: f64, seed: u64 },
    Preset { name: String, exponent: f64, seed: u64 },
    Csv { path: PathBuf },
    Inline,
}

/// Ordered samples of per-feature ids, stored flat (sample-major).
#[derive(Debug, Clone)]
pub struct Trace {
    num_ids: u32,
    features: usize,
    ids: Vec<RawId>,
    provenance: Provenance,
    table_offsets: Option<Vec<u32>>,
}

impl Trace {
    pub fn new(num_ids: u32, features: usize, ids: Vec<RawId>) -> Result<Self, WorkloadError> {
        Self::with_provenance(num_ids, features, ids, Provenance::Inline)
    }

    pub fn with_provenance(
        num_ids: u32,
        features: usize,
        ids: Vec<RawId>,
        provenance: Provenance,
    ) -> Result<Self, WorkloadError> {
        if features == 0 && !ids.is_empty() {
            return Err(WorkloadError::InvalidParam("features must be >= 1".into()));
        }
        if features > 0 && !ids.len().is_multiple_of(features) {
            return Err(WorkloadError::ShapeMismatch { len: ids.len(), features });
        }
        if let Some(bad) = ids.iter().find(|id| id.0 >= num_ids) {
            return Err(WorkloadError::IdOutOfRange { id: bad.0 as u64, num_ids });
        }
        Ok(Self { num_ids, features, ids, provenance, table_offsets: None })
    }

    pub fn num_ids(&self) -> u32 {
        self.num_ids
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn num_samples(&self) -> usize {
        self.ids.len().checked_div(self.features).unwrap_or(0)
    }

    /// All ids, sample-major.
    pub fn ids(&self) -> &[RawId] {
        &self.ids
    }

    pub fn sample(&self, i: usize) -> &[RawId] {
        &self.ids[i * self.features..(i + 1) * self.features]
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// The first `samples` samples.
    pub fn truncated(&self, samples: usize) -> Trace {
        let n = samples.min(self.num_samples()) * self.features;
        Trace { ids: self.ids[..n].to_vec(), ..self.clone() }
    }

    /// First id of each per-feature table, when the loader kept them.
    pub fn table_offsets(&self) -> Option<&[u32]> {
        self.table_offsets.as_deref()
    }

    /// Id ranges of the per-feature embedding tables: the loader's offsets
    /// when known, otherwise `features` near-equal contiguous ranges.
    pub fn tables(&self) -> Vec<Range<u32>> {
        match &self.table_offsets {
            Some(off) => off
                .iter()
                .enumerate()
                .map(|(i, &a)| a..off.get(i + 1).copied().unwrap_or(self.num_ids))
                .collect(),
            None => even_tables(self.num_ids, self.features),
        }
    }

    /// Consecutive non-overlapping windows of `batch_size` samples; the final
    /// partial window is emitted.
    pub fn batches(&self, batch_size: usize) -> Batches<'_> {
        Batches { trace: self, batch_size: batch_size.max(1), next_sample: 0, seq: 0 }
    }
}

/// Splits `0..num_ids` into `tables` contiguous ranges whose sizes differ by
/// at most one.
pub fn even_tables(num_ids: u32, tables: usize) -> Vec<Range<u32>> {
    let n = tables.max(1) as u64;
    (0..n)
        .map(|i| ((num_ids as u64 * i / n) as u32)..((num_ids as u64 * (i + 1) / n) as u32))
        .collect()
}

/// One iteration's input ids, flattened across features. Duplicates are kept.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub seq: u64,
    pub samples: usize,
    pub ids: &'a [RawId],
}

pub struct Batches<'a> {
    trace: &'a Trace,
    batch_size: usize,
    next_sample: usize,
    seq: u64,
}

impl<'a> Iterator for Batches<'a> {
    type Item = Batch<'a>;

    fn next(&mut self) -> Option<Batch<'a>> {
        let total = self.trace.num_samples();
        if self.next_sample >= total {
            return None;
        }
        let end = (self.next_sample + self.batch_size).min(total);
        let f = self.trace.features;
        let batch = Batch {
            seq: self.seq,
            samples: end - self.next_sample,
            ids: &self.trace.ids[self.next_sample * f..end * f],
        };
        self.next_sample = end;
        self.seq += 1;
        Some(batch)
    }
}

/// Number of ids making up the top `fraction` of `num_ids`, i.e.
/// `ceil(fraction * num_ids)` with float noise at integer boundaries ignored.
pub fn top_count(fraction: f64, num_ids: u32) -> usize {
    let raw = fraction * num_ids as f64;
    let rounded = raw.round();
    let k = if (raw - rounded).abs() <= 1e-9 * raw.max(1.0) { rounded } else { raw.ceil() };
    (k.max(0.0) as usize).min(num_ids as usize)
}

/// Expected head coverage of a Zipf(`exponent`) law over `num_ids` ranks:
/// the mass of the top `ceil(top_fraction * num_ids)` ranks.
pub fn zipf_head_coverage(num_ids: u32, exponent: f64, top_fraction: f64) -> f64 {
    let k = top_count(top_fraction, num_ids);
    let (head, total) = zipf_partial_sums(num_ids, exponent, k);
    head / total
}

fn zipf_partial_sums(num_ids: u32, exponent: f64, k: usize) -> (f64, f64) {
    // Sum smallest terms first to limit rounding error.
    let mut tail = 0.0f64;
    for r in ((k + 1)..=num_ids as usize).rev() {
        tail += (r as f64).powf(-exponent);
    }
    let mut head = 0.0f64;
    for r in (1..=k).rev() {
        head += (r as f64).powf(-exponent);
    }
    (head, head + tail)
}

/// Bisects the Zipf exponent until the expected head coverage of the top
/// `top_fraction` ids equals `target`.
pub fn calibrate_exponent(num_ids: u32, top_fraction: f64, target: f64) -> Result<f64, WorkloadError> {
    if num_ids < 2 {
        return Err(WorkloadError::InvalidParam("calibration needs num_ids >= 2".into()));
    }
    if !(0.0 < target && target < 1.0) {
        return Err(WorkloadError::InvalidParam(format!("target coverage {target} not in (0,1)")));
    }
    let k = top_count(top_fraction, num_ids);
    if k == 0 || k >= num_ids as usize {
        return Err(WorkloadError::InvalidParam(format!(
            "top fraction {top_fraction} selects {k} of {num_ids} ids"
        )));
    }
    let uniform = k as f64 / num_ids as f64;
    if target <= uniform {
        return Err(WorkloadError::InvalidParam(format!(
            "target {target} is below the uniform coverage {uniform}"
        )));
    }
    let (mut lo, mut hi) = (1e-6f64, 64.0f64);
    if zipf_head_coverage(num_ids, hi, top_fraction) < target {
        return Err(WorkloadError::InvalidParam(format!("target {target} unreachable")));
    }
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if zipf_head_coverage(num_ids, mid, top_fraction) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Samples generated per RNG substream. Chunks are independent, so any range
/// of the trace can be produced without generating what precedes it.
pub const CHUNK_SAMPLES: usize = 1024;

/// Seeded Zipf sampler over a random permutation of the id space, so the hot
/// ids are not the numerically smallest ones.
#[derive(Debug, Clone)]
pub struct ZipfGenerator {
    num_ids: u32,
    exponent: f64,
    features: usize,
    seed: u64,
    permutation: Vec<u32>,
    // rank sampler: weight (r + 1)^-exponent for rank r
    dist: WeightedAliasIndex<f64>,
}

impl ZipfGenerator {
    pub fn new(num_ids: u32, exponent: f64, features: usize, seed: u64) -> Result<Self, WorkloadError> {
        if num_ids == 0 {
            return Err(WorkloadError::InvalidParam("num_ids must be >= 1".into()));
        }
        if !(exponent > 0.0 && exponent.is_finite()) {
            return Err(WorkloadError::InvalidParam(format!("exponent {exponent} must be > 0")));
        }
        if features == 0 {
            return Err(WorkloadError::InvalidParam("features must be >= 1".into()));
        }
        let weights: Vec<f64> = (1..=num_ids).map(|r| (r as f64).powf(-exponent)).collect();
        let dist = WeightedAliasIndex::new(weights).map_err(|e| WorkloadError::InvalidParam(format!("zipf weights: {e}")))?;
        let mut permutation: Vec<u32> = (0..num_ids).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        permutation.shuffle(&mut rng);
        Ok(Self { num_ids, exponent, features, seed, permutation, dist })
    }

    pub fn num_ids(&self) -> u32 {
        self.num_ids
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    /// Raw id holding Zipf rank `r` (0 = most popular).
    pub fn id_at_rank(&self, r: usize) -> RawId {
        RawId(self.permutation[r])
    }

    fn chunk_ids(&self, chunk: u64, samples: usize) -> Vec<RawId> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(chunk + 1);
        let n = samples * self.features;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let rank = rng.sample(&self.dist);
            out.push(RawId(self.permutation[rank]));
        }
        out
    }

    /// Ids of samples `[start_chunk * CHUNK_SAMPLES, ..)` for `num_chunks`
    /// chunks, truncated to `max_samples`.
    fn chunks(&self, start_chunk: u64, num_chunks: usize, max_samples: usize) -> Vec<RawId> {
        let parts = par::map_range(num_chunks, |i| {
            let first = i * CHUNK_SAMPLES;
            let samples = CHUNK_SAMPLES.min(max_samples.saturating_sub(first));
            self.chunk_ids(start_chunk + i as u64, samples)
        });
        parts.concat()
    }

    pub fn generate(&self, num_samples: usize) -> Trace {
        let num_chunks = num_samples.div_ceil(CHUNK_SAMPLES);
        let ids = self.chunks(0, num_chunks, num_samples);
        Trace {
            num_ids: self.num_ids,
            features: self.features,
            ids,
            provenance: Provenance::Zipf { exponent: self.exponent, seed: self.seed },
            table_offsets: None,
        }
    }

    /// Streams the same samples `generate(num_samples)` would hold, batch by
    /// batch, without materializing the whole trace.
    pub fn stream(&self, num_samples: usize) -> ZipfStream<'_> {
        ZipfStream { gen: self, total: num_samples, produced: 0, next_chunk: 0, pending: Vec::new(), pos: 0 }
    }
}

pub struct ZipfStream<'a> {
    gen: &'a ZipfGenerator,
    total: usize,
    produced: usize,
    next_chunk: u64,
    pending: Vec<RawId>,
    pos: usize,
}

impl ZipfStream<'_> {
    /// Fills `out` with the next batch of up to `batch_size` samples.
    /// Returns false when the stream is exhausted.
    pub fn next_batch(&mut self, batch_size: usize, out: &mut Vec<RawId>) -> bool {
        out.clear();
        let f = self.gen.features;
        let want = batch_size.max(1).min(self.total - self.produced);
        if want == 0 {
            return false;
        }
        let mut need = want * f;
        while need > 0 {
            if self.pos == self.pending.len() {
                let generated = self.next_chunk as usize * CHUNK_SAMPLES;
                let left = self.total - generated;
                let chunks = (need / f).div_ceil(CHUNK_SAMPLES).max(1).min(left.div_ceil(CHUNK_SAMPLES));
                self.pending = self.gen.chunks(self.next_chunk, chunks, left);
                self.next_chunk += chunks as u64;
                self.pos = 0;
            }
            let take = need.min(self.pending.len() - self.pos);
            out.extend_from_slice(&self.pending[self.pos..self.pos + take]);
            self.pos += take;
            need -= take;
        }
        self.produced += want;
        true
    }
}

/// Ids drawn i.i.d. from Zipf(`exponent`) over a seeded permutation.
pub fn gen_zipf(
    num_ids: u32,
    exponent: f64,
    num_samples: usize,
    features: usize,
    seed: u64,
) -> Result<Trace, WorkloadError> {
    Ok(ZipfGenerator::new(num_ids, exponent, features, seed)?.generate(num_samples))
}

/// A named skew preset: the exponent is calibrated so that the top
/// `head_fraction` of ids receive `target_coverage` of all accesses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Preset {
    pub name: &'static str,
    pub head_fraction: f64,
    pub target_coverage: f64,
    pub features: usize,
    /// Id-space size the frozen exponent was calibrated at.
    pub reference_num_ids: u32,
    pub reference_exponent: f64,
}

/// Criteo Kaggle skew: top 0.14% of ids take 90% of accesses; 26 sparse features.
pub const CRITEO_LIKE: Preset = Preset {
    name: "criteo_like",
    head_fraction: 0.0014,
    target_coverage: 0.90,
    features: 26,
    reference_num_ids: 1_000_000,
    reference_exponent: 1.274_772_456_940_13,
};

/// Avazu skew: top 0.012% of ids take 90% of accesses; 13 sparse features.
pub const AVAZU_LIKE: Preset = Preset {
    name: "avazu_like",
    head_fraction: 0.00012,
    target_coverage: 0.90,
    features: 13,
    reference_num_ids: 1_000_000,
    reference_exponent: 1.428_302_020_797_605,
};

pub const PRESETS: [Preset; 2] = [CRITEO_LIKE, AVAZU_LIKE];

pub fn preset(name: &str) -> Option<Preset> {
    PRESETS.iter().copied().find(|p| p.name == name)
}

impl Preset {
    /// Calibrated exponent for an id space of `num_ids`.
    pub fn exponent_for(&self, num_ids: u32) -> Result<f64, WorkloadError> {
        if num_ids == self.reference_num_ids {
            Ok(self.reference_exponent)
        } else {
            calibrate_exponent(num_ids, self.head_fraction, self.target_coverage)
        }
    }

    pub fn generator(&self, num_ids: u32, features: Option<usize>, seed: u64) -> Result<ZipfGenerator, WorkloadError> {
        ZipfGenerator::new(num_ids, self.exponent_for(num_ids)?, features.unwrap_or(self.features), seed)
    }

    pub fn generate(
        &self,
        num_ids: u32,
        num_samples: usize,
        features: Option<usize>,
        seed: u64,
    ) -> Result<Trace, WorkloadError> {
        let gen = self.generator(num_ids, features, seed)?;
        let mut trace = gen.generate(num_samples);
        trace.provenance = Provenance::Preset { name: self.name.to_string(), exponent: gen.exponent, seed };
        Ok(trace)
    }
}

pub fn gen_criteo_like(num_ids: u32, num_samples: usize, features: usize, seed: u64) -> Result<Trace, WorkloadError> {
    CRITEO_LIKE.generate(num_ids, num_samples, Some(features), seed)
}

pub fn gen_avazu_like(num_ids: u32, num_samples: usize, features: usize, seed: u64) -> Result<Trace, WorkloadError> {
    AVAZU_LIKE.generate(num_ids, num_samples, Some(features), seed)
}

/// How CSV cell values become ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdRemap {
    /// Cells are decimal ids already in one global space (the trace format).
    #[default]
    Numeric,
    /// Cells are arbitrary categorical values; each column gets a dictionary
    /// in first-appearance order and a per-column offset into a global space.
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnMalformed {
    #[default]
    Fail,
    Skip,
}

#[derive(Debug, Clone, Default)]
pub struct CsvOptions {
    /// Header names to read; all columns when `None`.
    pub feature_columns: Option<Vec<String>>,
    pub id_remap: IdRemap,
    pub on_malformed: OnMalformed,
    /// Id-space size for numeric files; `max id + 1` when `None`.
    pub num_ids: Option<u32>,
}

/// Loads a CSV trace. Returns the trace and the number of skipped rows.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<(Trace, usize), WorkloadError> {
    let file = std::fs::File::open(path).map_err(|source| WorkloadError::Io { path: path.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let csv_err = |source| WorkloadError::Csv { path: path.to_path_buf(), source };
    let headers = reader.headers().map_err(csv_err)?.clone();

    if headers.is_empty() {
        let features = opts.feature_columns.as_ref().map_or(0, Vec::len);
        let trace = Trace::with_provenance(0, features, Vec::new(), Provenance::Csv { path: path.to_path_buf() })?;
        return Ok((trace, 0));
    }

    let columns: Vec<usize> = match &opts.feature_columns {
        Some(names) => names
            .iter()
            .map(|n| headers.iter().position(|h| h == n).ok_or_else(|| WorkloadError::MissingColumn(n.clone())))
            .collect::<Result<_, _>>()?,
        None => (0..headers.len()).collect(),
    };
    let features = columns.len();
    let mut skipped = 0usize;
    let mut local: Vec<u32> = Vec::new();
    let mut dicts: Vec<HashMap<String, u32>> = vec![HashMap::new(); features];
    let mut max_id: Option<u32> = None;

    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let row: Result<Vec<u32>, String> = if record.len() != headers.len() {
            Err(format!("expected {} fields, found {}", headers.len(), record.len()))
        } else {
            columns
                .iter()
                .enumerate()
                .map(|(f, &c)| {
                    let cell = &record[c];
                    match opts.id_remap {
                        IdRemap::Numeric => cell
                            .trim()
                            .parse::<u32>()
                            .map_err(|_| format!("column `{}`: `{}` is not a non-negative integer id", &headers[c], cell)),
                        IdRemap::Categorical => {
                            let d = &mut dicts[f];
                            let next = d.len() as u32;
                            Ok(*d.entry(cell.to_string()).or_insert(next))
                        }
                    }
                })
                .collect()
        };
        match row {
            Ok(ids) => {
                if opts.id_remap == IdRemap::Numeric {
                    if let Some(limit) = opts.num_ids {
                        if let Some(&bad) = ids.iter().find(|&&id| id >= limit) {
                            let reason = format!("id {bad} out of range for {limit} ids");
                            match opts.on_malformed {
                                OnMalformed::Fail => return Err(WorkloadError::MalformedRow { line, reason }),
                                OnMalformed::Skip => {
                                    log::warn!("{}: skipping line {line}: {reason}", path.display());
                                    skipped += 1;
                                    continue;
                                }
                            }
                        }
                    }
                    max_id = ids.iter().copied().chain(max_id).max();
                }
                local.extend_from_slice(&ids);
            }
            Err(reason) => match opts.on_malformed {
                OnMalformed::Fail => return Err(WorkloadError::MalformedRow { line, reason }),
                OnMalformed::Skip => {
                    log::warn!("{}: skipping line {line}: {reason}", path.display());
                    skipped += 1;
                }
            },
        }
    }

    let (num_ids, ids) = match opts.id_remap {
        IdRemap::Numeric => {
            let n = opts.num_ids.unwrap_or_else(|| max_id.map_or(0, |m| m + 1));
            (n, local.into_iter().map(RawId).collect())
        }
        IdRemap::Categorical => {
            let mut offsets = Vec::with_capacity(features);
            let mut acc = 0u64;
            for d in &dicts {
                offsets.push(acc as u32);
                acc += d.len() as u64;
            }
            if acc > u32::MAX as u64 {
                return Err(WorkloadError::InvalidParam(format!("{acc} distinct values exceed the u32 id space")));
            }
            let ids = local
                .chunks(features)
                .flat_map(|s| s.iter().zip(&offsets).map(|(&v, &o)| RawId(v + o)))
                .collect();
            let mut trace = Trace::with_provenance(acc as u32, features, ids, Provenance::Csv { path: path.to_path_buf() })?;
            trace.table_offsets = Some(offsets);
            return Ok((trace, skipped));
        }
    };
    let trace = Trace::with_provenance(num_ids, features, ids, Provenance::Csv { path: path.to_path_buf() })?;
    Ok((trace, skipped))
}

/// Writes `trace` in the trace CSV format: header `f0,f1,...`, one sample per line.
pub fn write_csv(trace: &Trace, path: &Path) -> Result<(), WorkloadError> {
    let csv_err = |source| WorkloadError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = (0..trace.features()).map(|f| format!("f{f}")).collect();
    w.write_record(&header).map_err(csv_err)?;
    let mut buf: Vec<String> = Vec::with_capacity(trace.features());
    for s in 0..trace.num_samples() {
        buf.clear();
        buf.extend(trace.sample(s).iter().map(|id| id.0.to_string()));
        w.write_record(&buf).map_err(csv_err)?;
    }
    w.flush().map_err(|source| WorkloadError::Io { path: path.to_path_buf(), source })?;
    Ok(())
}
