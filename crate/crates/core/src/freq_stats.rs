//! Static id-frequency statistics and the frequency-ordered row map.
//!
//! The slow tier stores rows sorted from most to least frequent, so a row's
//! slow-tier index doubles as its static frequency rank. [`IdxMap`] is that
//! total id -> row-index map; [`FrequencyTable`] is what it is built from.

use crate::ids::{RawId, RowIdx};
use crate::par;
use crate::workload::{top_count, Trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FreqError {
    #[error("id {id} out of range for {num_ids} ids")]
    IdOutOfRange { id: u32, num_ids: u32 },
    #[error("sample rate {0} not in (0, 1]")]
    InvalidSampleRate(f64),
    #[error("id space is empty")]
    EmptyIdSpace,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed statistics file: {0}")]
    Format(String),
    #[error("statistics json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Per-id access counts over a trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    num_ids: u32,
    counts: Vec<u64>,
    total: u64,
}

impl FrequencyTable {
    pub fn zeros(num_ids: u32) -> Self {
        Self { num_ids, counts: vec![0; num_ids as usize], total: 0 }
    }

    /// Builds a table from explicit `(id, count)` pairs. Repeated ids add up.
    pub fn from_pairs(num_ids: u32, pairs: impl IntoIterator<Item = (u32, u64)>) -> Result<Self, FreqError> {
        let mut t = Self::zeros(num_ids);
        for (id, c) in pairs {
            if id >= num_ids {
                return Err(FreqError::IdOutOfRange { id, num_ids });
            }
            t.counts[id as usize] += c;
            t.total += c;
        }
        Ok(t)
    }

    pub fn num_ids(&self) -> u32 {
        self.num_ids
    }

    pub fn total_accesses(&self) -> u64 {
        self.total
    }

    pub fn count(&self, id: RawId) -> u64 {
        self.counts.get(id.index()).copied().unwrap_or(0)
    }

    /// Dense counts indexed by raw id.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Observed ids with their counts, ascending by id.
    pub fn nonzero(&self) -> impl Iterator<Item = (RawId, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (RawId(i as u32), c))
    }

    pub fn observed_ids(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    fn add_ids(&mut self, ids: &[RawId]) {
        for id in ids {
            self.counts[id.index()] += 1;
        }
        self.total += ids.len() as u64;
    }

    fn merge(mut self, other: &Self) -> Self {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
        self.total += other.total;
        self
    }

    /// Writes the binary statistics file: magic, version, num_ids,
    /// total_accesses, pair count, then `(id: u32, count: u64)` pairs sorted
    /// by id, all little-endian.
    pub fn write_binary(&self, path: &Path) -> Result<(), FreqError> {
        let io = |source| FreqError::Io { path: path.to_path_buf(), source };
        let mut buf = Vec::with_capacity(32 + self.observed_ids() * 12);
        buf.extend_from_slice(STATS_MAGIC);
        buf.extend_from_slice(&STATS_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.num_ids as u64).to_le_bytes());
        buf.extend_from_slice(&self.total.to_le_bytes());
        buf.extend_from_slice(&(self.observed_ids() as u64).to_le_bytes());
        for (id, c) in self.nonzero() {
            buf.extend_from_slice(&id.0.to_le_bytes());
            buf.extend_from_slice(&c.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&buf).map_err(io)?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self, FreqError> {
        let io = |source| FreqError::Io { path: path.to_path_buf(), source };
        let mut bytes = Vec::new();
        std::fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
        Self::decode(&bytes)
    }

    fn decode(bytes: &[u8]) -> Result<Self, FreqError> {
        let header = 4 + 4 + 8 + 8 + 8;
        if bytes.len() < header || &bytes[..4] != STATS_MAGIC {
            return Err(FreqError::Format("bad magic or truncated header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != STATS_VERSION {
            return Err(FreqError::Format(format!("unsupported version {version}")));
        }
        let num_ids = u64_at(8);
        let total = u64_at(16);
        let pairs = u64_at(24) as usize;
        if num_ids > u32::MAX as u64 {
            return Err(FreqError::Format(format!("num_ids {num_ids} too large")));
        }
        if bytes.len() != header + pairs * 12 {
            return Err(FreqError::Format("pair section length mismatch".into()));
        }
        let mut prev: Option<u32> = None;
        let mut list = Vec::with_capacity(pairs);
        for i in 0..pairs {
            let o = header + i * 12;
            let id = u32_at(o);
            if prev.is_some_and(|p| p >= id) {
                return Err(FreqError::Format("pairs not strictly sorted by id".into()));
            }
            prev = Some(id);
            list.push((id, u64_at(o + 4)));
        }
        let t = Self::from_pairs(num_ids as u32, list)?;
        if t.total != total {
            return Err(FreqError::Format(format!("header total {total} != sum of counts {}", t.total)));
        }
        Ok(t)
    }

    pub fn to_json(&self) -> StatsJson {
        StatsJson {
            version: STATS_VERSION,
            num_ids: self.num_ids,
            total_accesses: self.total,
            counts: self.nonzero().map(|(id, c)| (id.0, c)).collect(),
        }
    }

    pub fn from_json(j: &StatsJson) -> Result<Self, FreqError> {
        let t = Self::from_pairs(j.num_ids, j.counts.iter().copied())?;
        if t.total != j.total_accesses {
            return Err(FreqError::Format("total_accesses does not match counts".into()));
        }
        Ok(t)
    }
}

const STATS_MAGIC: &[u8; 4] = b"FQST";
const STATS_VERSION: u32 = 1;

/// JSON view of a [`FrequencyTable`], for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsJson {
    pub version: u32,
    pub num_ids: u32,
    pub total_accesses: u64,
    /// `[id, count]` pairs sorted by id.
    pub counts: Vec<(u32, u64)>,
}

fn check_range(ids: &[RawId], num_ids: u32) -> Result<(), FreqError> {
    match ids.iter().find(|id| id.0 >= num_ids) {
        Some(bad) => Err(FreqError::IdOutOfRange { id: bad.0, num_ids }),
        None => Ok(()),
    }
}

fn count_chunked(ids: &[RawId], num_ids: u32) -> FrequencyTable {
    // Integer sums, so the merge order cannot change the result.
    const MIN_CHUNK: usize = 1 << 20;
    let chunk = MIN_CHUNK.max(ids.len().div_ceil(par::threads().max(1)));
    let parts: Vec<&[RawId]> = ids.chunks(chunk).collect();
    let tables = par::map(&parts, |part| {
        let mut t = FrequencyTable::zeros(num_ids);
        t.add_ids(part);
        t
    });
    tables
        .iter()
        .fold(FrequencyTable::zeros(num_ids), |acc, t| acc.merge(t))
}

/// Exact occurrence counts of every id in `trace`.
pub fn scan_frequencies(trace: &Trace, num_ids: u32) -> Result<FrequencyTable, FreqError> {
    check_range(trace.ids(), num_ids)?;
    Ok(count_chunked(trace.ids(), num_ids))
}

/// Counts over a uniform Bernoulli(`sample_rate`) subset of the trace's
/// samples (rows, not ids). A rate of 1.0 keeps every sample.
pub fn sample_frequencies(trace: &Trace, num_ids: u32, sample_rate: f64, seed: u64) -> Result<FrequencyTable, FreqError> {
    if !(sample_rate > 0.0 && sample_rate <= 1.0) {
        return Err(FreqError::InvalidSampleRate(sample_rate));
    }
    if sample_rate == 1.0 {
        return scan_frequencies(trace, num_ids);
    }
    check_range(trace.ids(), num_ids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = FrequencyTable::zeros(num_ids);
    for s in 0..trace.num_samples() {
        if rng.random_bool(sample_rate) {
            t.add_ids(trace.sample(s));
        }
    }
    Ok(t)
}

/// Incremental counterpart of [`sample_frequencies`] for traces that arrive
/// in pieces. Feeding a trace's samples in order gives the same table as the
/// one-shot functions.
#[derive(Debug, Clone)]
pub struct FrequencyScanner {
    table: FrequencyTable,
    features: usize,
    rate: f64,
    rng: ChaCha8Rng,
}

impl FrequencyScanner {
    pub fn new(num_ids: u32, features: usize, sample_rate: f64, seed: u64) -> Result<Self, FreqError> {
        if !(sample_rate > 0.0 && sample_rate <= 1.0) {
            return Err(FreqError::InvalidSampleRate(sample_rate));
        }
        Ok(Self {
            table: FrequencyTable::zeros(num_ids),
            features: features.max(1),
            rate: sample_rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Adds whole samples (`ids.len()` must be a multiple of the feature count).
    pub fn add_samples(&mut self, ids: &[RawId]) -> Result<(), FreqError> {
        check_range(ids, self.table.num_ids)?;
        if self.rate == 1.0 {
            self.table.add_ids(ids);
        } else {
            for sample in ids.chunks(self.features) {
                if self.rng.random_bool(self.rate) {
                    self.table.add_ids(sample);
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> FrequencyTable {
        self.table
    }
}

/// Total map from raw id to slow-tier row index (the id's frequency rank).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxMap {
    rank_of: Vec<RowIdx>,
    id_of: Vec<RawId>,
}

impl IdxMap {
    pub fn identity(num_ids: u32) -> Self {
        Self { rank_of: (0..num_ids).map(RowIdx).collect(), id_of: (0..num_ids).map(RawId).collect() }
    }

    /// Builds the map from ids listed hottest first. Fails unless `order` is
    /// a permutation of `[0, order.len())`.
    pub fn from_order(order: Vec<RawId>) -> Result<Self, FreqError> {
        let n = order.len() as u32;
        let mut rank_of = vec![RowIdx(u32::MAX); order.len()];
        for (rank, id) in order.iter().enumerate() {
            if id.0 >= n {
                return Err(FreqError::IdOutOfRange { id: id.0, num_ids: n });
            }
            if rank_of[id.index()].0 != u32::MAX {
                return Err(FreqError::Format(format!("id {id} listed twice")));
            }
            rank_of[id.index()] = RowIdx(rank as u32);
        }
        Ok(Self { rank_of, id_of: order })
    }

    pub fn len(&self) -> usize {
        self.id_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_of.is_empty()
    }

    #[inline]
    pub fn rank_of(&self, id: RawId) -> RowIdx {
        self.rank_of[id.index()]
    }

    #[inline]
    pub fn try_rank_of(&self, id: RawId) -> Option<RowIdx> {
        self.rank_of.get(id.index()).copied()
    }

    #[inline]
    pub fn id_of(&self, row: RowIdx) -> RawId {
        self.id_of[row.index()]
    }

    /// Ids in slow-tier row order.
    pub fn order(&self) -> &[RawId] {
        &self.id_of
    }
}

/// Orders ids by descending count; equal counts (including never-observed
/// ids) fall back to ascending raw id.
pub fn build_reorder(freq: &FrequencyTable) -> Result<IdxMap, FreqError> {
    if freq.num_ids == 0 {
        return Err(FreqError::EmptyIdSpace);
    }
    let mut order: Vec<RawId> = (0..freq.num_ids).map(RawId).collect();
    // keys are unique, so an unstable sort is still deterministic
    order.sort_unstable_by_key(|id| (Reverse(freq.counts[id.index()]), id.0));
    IdxMap::from_order(order)
}

/// Fraction of all accesses that hit the `ceil(top_fraction * num_ids)`
/// most frequent ids. Zero when nothing was accessed.
pub fn head_coverage(freq: &FrequencyTable, top_fraction: f64) -> f64 {
    if freq.total == 0 {
        return 0.0;
    }
    let k = top_count(top_fraction.clamp(0.0, 1.0), freq.num_ids);
    if k == 0 {
        return 0.0;
    }
    let mut counts = freq.counts.clone();
    let head: u64 = if k >= counts.len() {
        counts.iter().sum()
    } else {
        counts.select_nth_unstable_by_key(k - 1, |&c| Reverse(c));
        counts[..k].iter().sum()
    };
    head as f64 / freq.total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(num_ids: u32, features: usize, ids: &[u32]) -> Trace {
        Trace::new(num_ids, features, ids.iter().copied().map(RawId).collect()).unwrap()
    }

    #[test]
    fn scan_counts_by_hand() {
        let t = scan_frequencies(&trace(10, 1, &[5, 5, 2]), 10).unwrap();
        assert_eq!(t.count(RawId(5)), 2);
        assert_eq!(t.count(RawId(2)), 1);
        assert_eq!(t.total_accesses(), 3);
        assert_eq!(t.observed_ids(), 2);

        let empty = scan_frequencies(&trace(4, 1, &[]), 4).unwrap();
        assert_eq!(empty.total_accesses(), 0);
        assert!(empty.counts().iter().all(|&c| c == 0));
    }

    #[test]
    fn scan_reports_offending_id() {
        let t = trace(10, 1, &[1, 9, 3]);
        match scan_frequencies(&t, 5) {
            Err(FreqError::IdOutOfRange { id, num_ids }) => assert_eq!((id, num_ids), (9, 5)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sampling_rate_validation_and_degenerate_full_sample() {
        let t = trace(10, 2, &[1, 2, 3, 3, 4, 1]);
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(sample_frequencies(&t, 10, bad, 0), Err(FreqError::InvalidSampleRate(_))));
        }
        assert_eq!(sample_frequencies(&t, 10, 1.0, 3).unwrap(), scan_frequencies(&t, 10).unwrap());
    }

    #[test]
    fn scanner_matches_one_shot_scans() {
        let ids: Vec<u32> = (0..600).map(|i| (i * 37 % 50) as u32).collect();
        let t = trace(50, 3, &ids);
        for rate in [1.0, 0.3] {
            let mut sc = FrequencyScanner::new(50, 3, rate, 9).unwrap();
            for piece in t.ids().chunks(3 * 17) {
                sc.add_samples(piece).unwrap();
            }
            assert_eq!(sc.finish(), sample_frequencies(&t, 50, rate, 9).unwrap());
        }
    }

    #[test]
    fn reorder_by_hand() {
        let f = FrequencyTable::from_pairs(10, [(5, 3), (2, 2), (9, 1)]).unwrap();
        let m = build_reorder(&f).unwrap();
        assert_eq!(m.rank_of(RawId(5)), RowIdx(0));
        assert_eq!(m.rank_of(RawId(2)), RowIdx(1));
        assert_eq!(m.rank_of(RawId(9)), RowIdx(2));
        for (i, id) in [0u32, 1, 3, 4, 6, 7, 8].into_iter().enumerate() {
            assert_eq!(m.rank_of(RawId(id)), RowIdx(3 + i as u32));
        }
    }

    #[test]
    fn uniform_counts_keep_id_order() {
        let f = FrequencyTable::from_pairs(6, (0..6).map(|i| (i, 4))).unwrap();
        assert_eq!(build_reorder(&f).unwrap(), IdxMap::identity(6));
        assert!(matches!(build_reorder(&FrequencyTable::zeros(0)), Err(FreqError::EmptyIdSpace)));
    }

    #[test]
    fn head_coverage_by_hand() {
        let f = FrequencyTable::from_pairs(2, [(0, 9), (1, 1)]).unwrap();
        assert!((head_coverage(&f, 0.5) - 0.9).abs() < 1e-15);
        assert_eq!(head_coverage(&f, 1.0), 1.0);
        assert_eq!(head_coverage(&FrequencyTable::zeros(5), 0.5), 0.0);
        assert_eq!(head_coverage(&f, 0.0), 0.0);
    }

    #[test]
    fn from_order_rejects_non_permutations() {
        assert!(IdxMap::from_order(vec![RawId(0), RawId(0)]).is_err());
        assert!(IdxMap::from_order(vec![RawId(0), RawId(2)]).is_err());
    }

    #[test]
    fn binary_file_rejects_corruption() {
        let f = FrequencyTable::from_pairs(100, [(3, 7), (42, 1)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        f.write_binary(&p).unwrap();
        assert_eq!(FrequencyTable::read_binary(&p).unwrap(), f);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        assert!(FrequencyTable::decode(&bytes).is_err());
        let good = std::fs::read(&p).unwrap();
        assert!(FrequencyTable::decode(&good[..good.len() - 1]).is_err());
        let j = f.to_json();
        assert_eq!(FrequencyTable::from_json(&j).unwrap(), f);
    }
}
