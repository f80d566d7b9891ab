//! Fast-tier bookkeeping: batch preparation, eviction and write-back.
//!
//! [`CacheState::prepare`] follows the cache preparation routine step by step:
//! dedupe the batch and map it to slow-tier rows, find the rows that are not
//! resident, evict if there is not enough room (never touching rows the batch
//! itself needs), move the missing rows in, and hand back the slot of every id.
//!
//! With the default [`EvictionPolicy::StaticRank`] the victims are the
//! occupied, unprotected rows with the largest slow-tier index, i.e. the rows
//! that are least frequent over the whole dataset. Two runtime policies exist
//! only for comparison.

use crate::freq_stats::IdxMap;
use crate::ids::{RawId, RowIdx, Slot};
use crate::store::{FastTierStore, RowMatrix, SlowTierStore};
use crate::transmitter::{Direction, TransferError, TransferReport, Transmitter};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::sync::Arc;
use thiserror::Error;

const EMPTY: u32 = u32::MAX;
const ABSENT: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("id {id} out of range for {num_ids} ids")]
    IdOutOfRange { id: u32, num_ids: usize },
    #[error("batch has {unique} unique ids but the cache holds {capacity} rows; raise the cache ratio")]
    BatchExceedsCapacity { unique: usize, capacity: usize },
    #[error("need {needed} evictions but only {available} unprotected rows are resident")]
    InsufficientEvictable { needed: usize, available: usize },
    #[error("need {needed} free slots but only {free} are free")]
    InsufficientFreeSlots { needed: usize, free: usize },
    #[error("warm-up of {k} rows exceeds capacity {capacity}")]
    WarmupTooLarge { k: usize, capacity: usize },
    #[error("slot {slot} out of range for capacity {capacity}")]
    SlotOutOfRange { slot: u32, capacity: usize },
    #[error("slot {0} holds no row")]
    SlotEmpty(u32),
    #[error("id {0} was not prepared in this batch")]
    NotPrepared(u32),
    #[error("slot {slot} for id {id} has been reassigned since prepare")]
    StaleSlot { id: u32, slot: u32 },
    #[error("deltas have {got} rows of {got_dim}, expected {want} rows of {want_dim}")]
    ShapeMismatch { want: usize, want_dim: usize, got: usize, got_dim: usize },
    #[error(transparent)]
    Transfer(#[from] TransferError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionPolicy {
    /// Evict the largest slow-tier indices (lowest static dataset frequency).
    #[default]
    StaticRank,
    /// Evict the smallest access count since the run started.
    RuntimeLfu,
    /// Evict the least recently referenced rows.
    Lru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteBackMode {
    /// Only rows updated since admission go back to the slow tier.
    #[default]
    DirtyOnly,
    /// Every evicted row goes back, dirty or not.
    Always,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictCountMode {
    /// `max(0, misses - free slots)`.
    #[default]
    OccupancyAware,
    /// `max(0, misses - capacity)`. Fails with `InsufficientFreeSlots` once
    /// the cache is full.
    MissesMinusCapacity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacheConfig {
    pub policy: EvictionPolicy,
    pub write_back: WriteBackMode,
    pub evict_count: EvictCountMode,
}

/// Raw id -> slot for every unique id of one prepared batch, sorted by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlotMap {
    entries: Vec<(RawId, Slot, RowIdx)>,
}

impl SlotMap {
    pub fn get(&self, id: RawId) -> Option<Slot> {
        self.entry(id).map(|e| e.1)
    }

    fn entry(&self, id: RawId) -> Option<&(RawId, Slot, RowIdx)> {
        self.entries.binary_search_by_key(&id, |e| e.0).ok().map(|i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(id, slot)` pairs ascending by id.
    pub fn iter(&self) -> impl Iterator<Item = (RawId, Slot)> + '_ {
        self.entries.iter().map(|e| (e.0, e.1))
    }
}

#[derive(Debug, Clone)]
pub struct PrepareResult {
    pub slot_of: SlotMap,
    pub unique_ids: usize,
    pub accesses: usize,
    /// Occurrences (not unique ids) that were already resident.
    pub access_hits: usize,
    pub hits: usize,
    pub misses: usize,
    pub evictions: usize,
    pub transfer_reports: Vec<TransferReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Batch,
}

/// One line of the eviction event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEvent {
    pub phase: Phase,
    pub batch_seq: u64,
    pub misses: u64,
    /// Evicted slow-tier rows, in selection order.
    pub evicted: Vec<u32>,
    /// Admitted slow-tier rows, ascending.
    pub admitted: Vec<u32>,
}

/// Writes events as JSON lines.
pub fn write_event_log<W: Write>(events: &[CacheEvent], mut w: W) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_event_log<R: BufRead>(r: R) -> std::io::Result<Vec<CacheEvent>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

/// Slot table of the fast tier plus its inverse index and dirty bits.
#[derive(Debug, Clone)]
pub struct CacheState {
    cfg: CacheConfig,
    slot_to_rank: Vec<u32>,
    rank_to_slot: Vec<u32>,
    dirty: Vec<bool>,
    free_count: usize,
    // runtime_lfu: accesses per row since the run started
    access_counts: Vec<u64>,
    // lru: last batch tick per slot
    last_use: Vec<u64>,
    clock: u64,
    epoch: u32,
    rank_mark: Vec<u32>,
    slot_mark: Vec<u32>,
    batch_seq: u64,
    events: Option<Vec<CacheEvent>>,
    // fault injection: dirty eviction write-backs left before one is dropped
    drop_writeback: Option<usize>,
}

impl CacheState {
    pub fn new(num_rows: usize, capacity: usize, cfg: CacheConfig) -> Self {
        assert!(capacity >= 1 && capacity <= num_rows.max(1), "capacity {capacity} for {num_rows} rows");
        Self {
            cfg,
            slot_to_rank: vec![EMPTY; capacity],
            rank_to_slot: vec![ABSENT; num_rows],
            dirty: vec![false; capacity],
            free_count: capacity,
            access_counts: if cfg.policy == EvictionPolicy::RuntimeLfu { vec![0; num_rows] } else { Vec::new() },
            last_use: if cfg.policy == EvictionPolicy::Lru { vec![0; capacity] } else { Vec::new() },
            clock: 1,
            epoch: 0,
            rank_mark: vec![0; num_rows],
            slot_mark: vec![0; capacity],
            batch_seq: 0,
            events: None,
            drop_writeback: None,
        }
    }

    pub fn config(&self) -> CacheConfig {
        self.cfg
    }

    pub fn capacity(&self) -> usize {
        self.slot_to_rank.len()
    }

    pub fn free_count(&self) -> usize {
        self.free_count
    }

    pub fn occupied(&self) -> usize {
        self.capacity() - self.free_count
    }

    /// Row held by `slot`, if any.
    pub fn row_at(&self, slot: Slot) -> Option<RowIdx> {
        match self.slot_to_rank.get(slot.index()) {
            Some(&r) if r != EMPTY => Some(RowIdx(r)),
            _ => None,
        }
    }

    /// Slot holding `row`, if resident.
    pub fn slot_of_row(&self, row: RowIdx) -> Option<Slot> {
        match self.rank_to_slot.get(row.index()) {
            Some(&s) if s != ABSENT => Some(Slot(s)),
            _ => None,
        }
    }

    pub fn is_dirty(&self, slot: Slot) -> bool {
        self.dirty.get(slot.index()).copied().unwrap_or(false)
    }

    pub fn dirty_count(&self) -> usize {
        self.dirty.iter().filter(|&&d| d).count()
    }

    /// Resident rows, ascending.
    pub fn resident_rows(&self) -> Vec<RowIdx> {
        let mut v: Vec<RowIdx> = self.slot_to_rank.iter().filter(|&&r| r != EMPTY).map(|&r| RowIdx(r)).collect();
        v.sort_unstable();
        v
    }

    /// Bytes held by the index structures (slot table, inverse index, dirty
    /// bits, policy metadata and scratch marks).
    pub fn index_bytes(&self) -> usize {
        self.slot_to_rank.len() * 4
            + self.rank_to_slot.len() * 4
            + self.dirty.len()
            + self.access_counts.len() * 8
            + self.last_use.len() * 8
            + self.rank_mark.len() * 4
            + self.slot_mark.len() * 4
    }

    pub fn enable_event_log(&mut self) {
        self.events.get_or_insert_with(Vec::new);
    }

    pub fn events(&self) -> Option<&[CacheEvent]> {
        self.events.as_deref()
    }

    pub fn take_events(&mut self) -> Option<Vec<CacheEvent>> {
        self.events.take()
    }

    /// Checks the slot table, inverse index and free count agree.
    pub fn check_consistency(&self) -> Result<(), String> {
        let mut occupied = 0;
        for (s, &r) in self.slot_to_rank.iter().enumerate() {
            if r == EMPTY {
                if self.dirty[s] {
                    return Err(format!("empty slot {s} is dirty"));
                }
                continue;
            }
            occupied += 1;
            if self.rank_to_slot.get(r as usize) != Some(&(s as u32)) {
                return Err(format!("slot {s} holds row {r} but the inverse index disagrees"));
            }
        }
        let inverse = self.rank_to_slot.iter().filter(|&&s| s != ABSENT).count();
        if inverse != occupied {
            return Err(format!("{inverse} rows indexed but {occupied} slots occupied"));
        }
        if self.free_count != self.capacity() - occupied {
            return Err(format!("free count {} but {} empty slots", self.free_count, self.capacity() - occupied));
        }
        Ok(())
    }

    fn next_epoch(&mut self) -> u32 {
        if self.epoch == u32::MAX {
            self.rank_mark.iter_mut().for_each(|m| *m = 0);
            self.slot_mark.iter_mut().for_each(|m| *m = 0);
            self.epoch = 0;
        }
        self.epoch += 1;
        self.epoch
    }

    fn check_slot(&self, slot: Slot) -> Result<usize, CacheError> {
        match self.slot_to_rank.get(slot.index()) {
            None => Err(CacheError::SlotOutOfRange { slot: slot.0, capacity: self.capacity() }),
            Some(&EMPTY) => Err(CacheError::SlotEmpty(slot.0)),
            Some(_) => Ok(slot.index()),
        }
    }

    /// Picks `needed` victims among occupied slots for which `protected` is
    /// false, according to the configured policy. Victims are returned in
    /// selection order (for static ranks: largest row first).
    fn pick_victims(&self, needed: usize, protected: impl Fn(usize) -> bool) -> Result<Vec<Slot>, CacheError> {
        if needed == 0 {
            return Ok(Vec::new());
        }
        let candidates = self
            .slot_to_rank
            .iter()
            .enumerate()
            .filter(|&(s, &r)| r != EMPTY && !protected(s))
            .map(|(s, _)| s);
        // (key, slot): smaller key is evicted first
        let mut keyed: Vec<(u64, u32)> = match self.cfg.policy {
            EvictionPolicy::StaticRank => {
                candidates.map(|s| (u64::from(u32::MAX - self.slot_to_rank[s]), s as u32)).collect()
            }
            EvictionPolicy::Lru => candidates.map(|s| (self.last_use[s], s as u32)).collect(),
            EvictionPolicy::RuntimeLfu => candidates
                .map(|s| (self.access_counts[self.slot_to_rank[s] as usize], s as u32))
                .collect(),
        };
        if keyed.len() < needed {
            return Err(CacheError::InsufficientEvictable { needed, available: keyed.len() });
        }
        if needed < keyed.len() {
            keyed.select_nth_unstable(needed - 1);
            keyed.truncate(needed);
        }
        keyed.sort_unstable();
        Ok(keyed.into_iter().map(|(_, s)| Slot(s)).collect())
    }

    /// Victim slots for `needed` evictions with `protected` rows exempt.
    pub fn select_evictions(&self, needed: usize, protected: &HashSet<RowIdx>) -> Result<Vec<Slot>, CacheError> {
        self.pick_victims(needed, |s| protected.contains(&RowIdx(self.slot_to_rank[s])))
    }

    fn release(&mut self, slot: Slot) {
        let r = self.slot_to_rank[slot.index()];
        self.rank_to_slot[r as usize] = ABSENT;
        self.slot_to_rank[slot.index()] = EMPTY;
        self.dirty[slot.index()] = false;
        self.free_count += 1;
    }

    fn assign(&mut self, slot: Slot, row: RowIdx) {
        debug_assert_eq!(self.slot_to_rank[slot.index()], EMPTY);
        self.slot_to_rank[slot.index()] = row.0;
        self.rank_to_slot[row.index()] = slot.0;
        self.dirty[slot.index()] = false;
        if self.cfg.policy == EvictionPolicy::Lru {
            self.last_use[slot.index()] = self.clock;
        }
        self.free_count -= 1;
    }

    fn free_slots(&self, n: usize) -> Vec<Slot> {
        self.slot_to_rank
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == EMPTY)
            .take(n)
            .map(|(s, _)| Slot(s as u32))
            .collect()
    }

    fn evict(
        &mut self,
        victims: &[Slot],
        tx: &mut Transmitter,
        slow: &mut SlowTierStore,
        fast: &FastTierStore,
    ) -> Result<TransferReport, CacheError> {
        let (mut wb_slots, mut wb_rows): (Vec<Slot>, Vec<RowIdx>) = victims
            .iter()
            .filter(|s| self.cfg.write_back == WriteBackMode::Always || self.dirty[s.index()])
            .map(|&s| (s, RowIdx(self.slot_to_rank[s.index()])))
            .unzip();
        if let Some(left) = self.drop_writeback {
            let dirty: Vec<usize> = (0..wb_slots.len()).filter(|&i| self.dirty[wb_slots[i].index()]).collect();
            if left < dirty.len() {
                let i = dirty[left];
                log::warn!("fault injection: dropping write-back of row {}", wb_rows[i]);
                wb_slots.remove(i);
                wb_rows.remove(i);
                self.drop_writeback = None;
            } else {
                self.drop_writeback = Some(left - dirty.len());
            }
        }
        let report = tx.move_to_slow(&wb_slots, &wb_rows, fast, slow)?;
        for &s in victims {
            self.release(s);
        }
        Ok(report)
    }

    /// Makes every id of `ids` resident and returns its slot.
    pub fn prepare(
        &mut self,
        idx_map: &IdxMap,
        ids: &[RawId],
        tx: &mut Transmitter,
        slow: &mut SlowTierStore,
        fast: &mut FastTierStore,
    ) -> Result<PrepareResult, CacheError> {
        let epoch = self.next_epoch();
        let mut unique: Vec<(RawId, RowIdx)> = Vec::new();
        let mut access_hits = 0usize;
        for &id in ids {
            let row = idx_map
                .try_rank_of(id)
                .ok_or(CacheError::IdOutOfRange { id: id.0, num_ids: idx_map.len() })?;
            if self.rank_to_slot[row.index()] != ABSENT {
                access_hits += 1;
            }
            let mark = &mut self.rank_mark[row.index()];
            if *mark != epoch {
                *mark = epoch;
                unique.push((id, row));
            }
        }
        if unique.len() > self.capacity() {
            return Err(CacheError::BatchExceedsCapacity { unique: unique.len(), capacity: self.capacity() });
        }

        let mut missing: Vec<RowIdx> = Vec::new();
        for &(_, row) in &unique {
            match self.rank_to_slot[row.index()] {
                ABSENT => missing.push(row),
                s => {
                    self.slot_mark[s as usize] = epoch;
                    if self.cfg.policy == EvictionPolicy::Lru {
                        self.last_use[s as usize] = self.clock;
                    }
                }
            }
            if self.cfg.policy == EvictionPolicy::RuntimeLfu {
                self.access_counts[row.index()] += 1;
            }
        }
        missing.sort_unstable();
        let hits = unique.len() - missing.len();

        let evict_num = match self.cfg.evict_count {
            EvictCountMode::OccupancyAware => missing.len().saturating_sub(self.free_count),
            EvictCountMode::MissesMinusCapacity => missing.len().saturating_sub(self.capacity()),
        };
        let mut reports = Vec::with_capacity(2);
        let mut evicted_rows = Vec::new();
        if evict_num > 0 {
            let victims = {
                let marks = &self.slot_mark;
                self.pick_victims(evict_num, |s| marks[s] == epoch)?
            };
            evicted_rows = victims.iter().map(|s| self.slot_to_rank[s.index()]).collect();
            reports.push(self.evict(&victims, tx, slow, fast)?);
        } else {
            reports.push(TransferReport::empty(Direction::ToSlow));
        }

        if self.free_count < missing.len() {
            return Err(CacheError::InsufficientFreeSlots { needed: missing.len(), free: self.free_count });
        }
        let targets = self.free_slots(missing.len());
        reports.push(tx.move_to_fast(&missing, &targets, slow, fast)?);
        for (&slot, &row) in targets.iter().zip(&missing) {
            self.assign(slot, row);
        }

        if let Some(log) = self.events.as_mut() {
            log.push(CacheEvent {
                phase: Phase::Batch,
                batch_seq: self.batch_seq,
                misses: missing.len() as u64,
                evicted: evicted_rows,
                admitted: missing.iter().map(|r| r.0).collect(),
            });
        }
        self.clock += 1;
        self.batch_seq += 1;

        let mut entries: Vec<(RawId, Slot, RowIdx)> = unique
            .iter()
            .map(|&(id, row)| (id, Slot(self.rank_to_slot[row.index()]), row))
            .collect();
        entries.sort_unstable_by_key(|e| e.0);
        Ok(PrepareResult {
            slot_of: SlotMap { entries },
            unique_ids: unique.len(),
            accesses: ids.len(),
            access_hits,
            hits,
            misses: missing.len(),
            evictions: evict_num,
            transfer_reports: reports,
        })
    }

    /// Fills free slots with the `k` hottest rows (rows `0..k`).
    pub fn warmup(
        &mut self,
        k: usize,
        tx: &mut Transmitter,
        slow: &SlowTierStore,
        fast: &mut FastTierStore,
    ) -> Result<TransferReport, CacheError> {
        if k > self.capacity() {
            return Err(CacheError::WarmupTooLarge { k, capacity: self.capacity() });
        }
        let rows: Vec<RowIdx> = (0..k as u32).map(RowIdx).filter(|r| self.rank_to_slot[r.index()] == ABSENT).collect();
        if rows.len() > self.free_count {
            return Err(CacheError::InsufficientFreeSlots { needed: rows.len(), free: self.free_count });
        }
        let targets = self.free_slots(rows.len());
        let report = tx.move_to_fast(&rows, &targets, slow, fast)?;
        for (&slot, &row) in targets.iter().zip(&rows) {
            self.assign(slot, row);
            if self.cfg.policy == EvictionPolicy::RuntimeLfu {
                self.access_counts[row.index()] += 1;
            }
        }
        if let Some(log) = self.events.as_mut() {
            log.push(CacheEvent {
                phase: Phase::Warmup,
                batch_seq: self.batch_seq,
                misses: rows.len() as u64,
                evicted: Vec::new(),
                admitted: rows.iter().map(|r| r.0).collect(),
            });
        }
        self.clock += 1;
        Ok(report)
    }

    /// Test hook: silently drops the dirty eviction write-back after `nth`
    /// earlier ones, corrupting the slow tier.
    #[doc(hidden)]
    pub fn inject_dropped_writeback(&mut self, nth: usize) {
        self.drop_writeback = Some(nth);
    }

    /// Marks slots as holding values newer than the slow tier.
    pub fn mark_dirty(&mut self, slots: &[Slot]) -> Result<(), CacheError> {
        for &s in slots {
            self.check_slot(s)?;
        }
        for &s in slots {
            self.dirty[s.index()] = true;
        }
        Ok(())
    }

    /// Writes every dirty slot back; rows stay resident and become clean.
    pub fn flush(
        &mut self,
        tx: &mut Transmitter,
        slow: &mut SlowTierStore,
        fast: &FastTierStore,
    ) -> Result<TransferReport, CacheError> {
        let (slots, rows): (Vec<Slot>, Vec<RowIdx>) = self
            .dirty
            .iter()
            .enumerate()
            .filter(|(_, &d)| d)
            .map(|(s, _)| (Slot(s as u32), RowIdx(self.slot_to_rank[s])))
            .unzip();
        let report = tx.move_to_slow(&slots, &rows, fast, slow)?;
        for s in slots {
            self.dirty[s.index()] = false;
        }
        Ok(report)
    }

    fn resolve(&self, slot_of: &SlotMap, id: RawId) -> Result<Slot, CacheError> {
        let &(_, slot, row) = slot_of.entry(id).ok_or(CacheError::NotPrepared(id.0))?;
        if self.slot_to_rank.get(slot.index()) != Some(&row.0) {
            return Err(CacheError::StaleSlot { id: id.0, slot: slot.0 });
        }
        Ok(slot)
    }

    /// Rows for `ids` in order, duplicates repeated.
    pub fn gather(&self, fast: &FastTierStore, slot_of: &SlotMap, ids: &[RawId]) -> Result<RowMatrix, CacheError> {
        let mut out = RowMatrix::with_capacity(ids.len(), fast.dim());
        if ids.is_empty() {
            return Ok(RowMatrix::zeros(0, fast.dim()));
        }
        for &id in ids {
            out.push_row(fast.row(self.resolve(slot_of, id)?));
        }
        Ok(out)
    }

    /// Adds `deltas.row(k)` to the row of `ids[k]`; duplicates accumulate in
    /// order. Touched slots become dirty.
    pub fn scatter_update(
        &mut self,
        fast: &mut FastTierStore,
        slot_of: &SlotMap,
        ids: &[RawId],
        deltas: &RowMatrix,
    ) -> Result<(), CacheError> {
        if deltas.rows() != ids.len() || (!ids.is_empty() && deltas.dim() != fast.dim()) {
            return Err(CacheError::ShapeMismatch {
                want: ids.len(),
                want_dim: fast.dim(),
                got: deltas.rows(),
                got_dim: deltas.dim(),
            });
        }
        let slots = ids.iter().map(|&id| self.resolve(slot_of, id)).collect::<Result<Vec<_>, _>>()?;
        for (k, &s) in slots.iter().enumerate() {
            for (v, d) in fast.row_mut(s).iter_mut().zip(deltas.row(k)) {
                *v += *d;
            }
            self.dirty[s.index()] = true;
        }
        Ok(())
    }

    /// Applies `update` in place to the row of every id in `slot_of`
    /// (ascending id order) and marks those slots dirty.
    pub fn update_resident(
        &mut self,
        fast: &mut FastTierStore,
        slot_of: &SlotMap,
        mut update: impl FnMut(RawId, &mut [f32]),
    ) -> Result<(), CacheError> {
        for &(id, _, _) in &slot_of.entries {
            self.resolve(slot_of, id)?;
        }
        for &(id, slot, _) in &slot_of.entries {
            update(id, fast.row_mut(slot));
            self.dirty[slot.index()] = true;
        }
        Ok(())
    }
}

/// One shard's complete cache: row map, both tiers, slot table and transmitter.
#[derive(Debug)]
pub struct CacheStack {
    pub idx_map: Arc<IdxMap>,
    pub slow: SlowTierStore,
    pub fast: FastTierStore,
    pub state: CacheState,
    pub tx: Transmitter,
}

impl CacheStack {
    pub fn new(idx_map: Arc<IdxMap>, slow: SlowTierStore, fast: FastTierStore, cfg: CacheConfig, tx: Transmitter) -> Self {
        let state = CacheState::new(slow.len(), fast.capacity(), cfg);
        Self { idx_map, slow, fast, state, tx }
    }

    pub fn prepare(&mut self, ids: &[RawId]) -> Result<PrepareResult, CacheError> {
        self.state.prepare(&self.idx_map, ids, &mut self.tx, &mut self.slow, &mut self.fast)
    }

    pub fn warmup(&mut self, k: usize) -> Result<TransferReport, CacheError> {
        self.state.warmup(k, &mut self.tx, &self.slow, &mut self.fast)
    }

    pub fn flush(&mut self) -> Result<TransferReport, CacheError> {
        self.state.flush(&mut self.tx, &mut self.slow, &self.fast)
    }

    pub fn gather(&self, slot_of: &SlotMap, ids: &[RawId]) -> Result<RowMatrix, CacheError> {
        self.state.gather(&self.fast, slot_of, ids)
    }

    pub fn scatter_update(&mut self, slot_of: &SlotMap, ids: &[RawId], deltas: &RowMatrix) -> Result<(), CacheError> {
        self.state.scatter_update(&mut self.fast, slot_of, ids, deltas)
    }

    pub fn update_resident(&mut self, slot_of: &SlotMap, update: impl FnMut(RawId, &mut [f32])) -> Result<(), CacheError> {
        self.state.update_resident(&mut self.fast, slot_of, update)
    }

    /// Authoritative value of `id`'s row: the fast copy when resident, the
    /// slow copy otherwise.
    pub fn current_row(&self, id: RawId) -> &[f32] {
        let row = self.idx_map.rank_of(id);
        match self.state.slot_of_row(row) {
            Some(s) => self.fast.row(s),
            None => self.slow.row(row),
        }
    }
}

/// Outcome of replaying an event log against the eviction rules.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayReport {
    pub events: usize,
    pub eviction_events: usize,
    pub evicted_rows: usize,
    pub violations: Vec<String>,
}

/// Replays `events` from an empty cache of `capacity` slots. `batch_rows`
/// yields the unique rows each batch event needed. Checks admissions, the
/// eviction count (occupancy-aware), that no protected row is evicted, and,
/// when `static_rank` is set, that the victims are exactly the largest
/// unprotected resident rows.
pub fn replay_eviction_law<I>(events: &[CacheEvent], capacity: usize, batch_rows: I, static_rank: bool) -> ReplayReport
where
    I: IntoIterator<Item = Vec<RowIdx>>,
{
    let mut rep = ReplayReport::default();
    let mut occupied: BTreeSet<u32> = BTreeSet::new();
    let mut batches = batch_rows.into_iter();
    for e in events {
        rep.events += 1;
        let tag = format!("{:?} {}", e.phase, e.batch_seq);
        match e.phase {
            Phase::Warmup => {
                if !e.evicted.is_empty() {
                    rep.violations.push(format!("{tag}: warm-up evicted rows"));
                }
            }
            Phase::Batch => {
                let Some(rows) = batches.next() else {
                    rep.violations.push(format!("{tag}: no batch to replay against"));
                    break;
                };
                let protected: HashSet<u32> = rows.iter().map(|r| r.0).collect();
                let mut expect_missing: Vec<u32> = protected.iter().copied().filter(|r| !occupied.contains(r)).collect();
                expect_missing.sort_unstable();
                if expect_missing != e.admitted || e.misses as usize != e.admitted.len() {
                    rep.violations.push(format!("{tag}: admitted rows differ from the batch's missing rows"));
                }
                let needed = expect_missing.len().saturating_sub(capacity - occupied.len());
                if e.evicted.len() != needed {
                    rep.violations.push(format!("{tag}: evicted {} rows, expected {needed}", e.evicted.len()));
                }
                if let Some(p) = e.evicted.iter().find(|r| protected.contains(r)) {
                    rep.violations.push(format!("{tag}: protected row {p} evicted"));
                }
                if let Some(r) = e.evicted.iter().find(|r| !occupied.contains(r)) {
                    rep.violations.push(format!("{tag}: evicted row {r} was not resident"));
                }
                if static_rank && !e.evicted.is_empty() {
                    let expect: BTreeSet<u32> =
                        occupied.iter().rev().filter(|r| !protected.contains(r)).take(needed).copied().collect();
                    let got: BTreeSet<u32> = e.evicted.iter().copied().collect();
                    if expect != got {
                        rep.violations.push(format!("{tag}: evicted set is not the top-{needed} unprotected rows"));
                    }
                }
                if !e.evicted.is_empty() {
                    rep.eviction_events += 1;
                }
            }
        }
        rep.evicted_rows += e.evicted.len();
        for r in &e.evicted {
            occupied.remove(r);
        }
        for &r in &e.admitted {
            if !occupied.insert(r) {
                rep.violations.push(format!("{tag}: admitted row {r} already resident"));
            }
        }
        if occupied.len() > capacity {
            rep.violations.push(format!("{tag}: {} rows resident over capacity {capacity}", occupied.len()));
        }
    }
    rep
}
