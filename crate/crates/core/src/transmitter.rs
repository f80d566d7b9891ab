//! Bounded-buffer block transfers between the tiers, with a channel cost model.
//!
//! Scattered rows are packed into a contiguous staging buffer at the source,
//! sent as one message per buffer fill, and scattered at the destination.
//! Rows are never split across messages.

use crate::ids::{RowIdx, Slot};
use crate::store::{FastTierStore, SlowTierStore, StoreError, ELEM_BYTES};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("a {row_bytes}-byte row does not fit the {buffer_bytes}-byte buffer")]
    BufferTooSmall { row_bytes: u64, buffer_bytes: u64 },
    #[error("{sources} source rows but {targets} targets")]
    LengthMismatch { sources: usize, targets: usize },
    #[error("invalid channel model: {0}")]
    InvalidChannel(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub const GIB: f64 = 1024.0 * 1024.0 * 1024.0;
pub const MIB: u64 = 1024 * 1024;
pub const DEFAULT_BUFFER_BYTES: u64 = 64 * MIB;

/// Cost of moving bytes across the tier boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelModel {
    /// Seconds per message.
    pub latency_s: f64,
    /// Bytes per second across the tier boundary.
    pub bandwidth_bps: f64,
    /// Bytes per second for gather/scatter copies inside one tier.
    pub local_bandwidth_bps: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self { latency_s: 10e-6, bandwidth_bps: 12.0 * GIB, local_bandwidth_bps: 200.0 * GIB }
    }
}

impl ChannelModel {
    pub fn validate(&self) -> Result<(), TransferError> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !(ok(self.latency_s) && ok(self.bandwidth_bps) && ok(self.local_bandwidth_bps)) {
            return Err(TransferError::InvalidChannel(format!("all parameters must be positive: {self:?}")));
        }
        if self.local_bandwidth_bps < self.bandwidth_bps {
            return Err(TransferError::InvalidChannel(
                "local bandwidth must be at least the cross-tier bandwidth".into(),
            ));
        }
        Ok(())
    }

    /// Block transfer: per-message latency, the wire time, and a gather at
    /// the source plus a scatter at the destination.
    pub fn block_time(&self, messages: u64, bytes: u64) -> f64 {
        let b = bytes as f64;
        messages as f64 * self.latency_s + b / self.bandwidth_bps + 2.0 * b / self.local_bandwidth_bps
    }

    /// Row-granular transfer: one message per row, no staging copies.
    pub fn rowwise_time(&self, rows: u64, bytes: u64) -> f64 {
        rows as f64 * self.latency_s + bytes as f64 / self.bandwidth_bps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ToFast,
    ToSlow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Pack rows into buffer-sized blocks.
    #[default]
    Block,
    /// One message per row, the page/row-granular baseline.
    RowWise,
}

/// Accounting for one transmitter action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub direction: Direction,
    pub rows: u64,
    pub bytes: u64,
    pub messages: u64,
    pub modeled_time_s: f64,
    /// Largest single message payload.
    pub max_message_bytes: u64,
}

impl TransferReport {
    pub fn empty(direction: Direction) -> Self {
        Self { direction, rows: 0, bytes: 0, messages: 0, modeled_time_s: 0.0, max_message_bytes: 0 }
    }
}

/// Messages needed to move `rows` rows of `row_bytes` each through a
/// `buffer_bytes` buffer, packing whole rows per message.
pub fn chunk_plan(rows: u64, row_bytes: u64, buffer_bytes: u64) -> Result<u64, TransferError> {
    if row_bytes == 0 || row_bytes > buffer_bytes {
        return Err(TransferError::BufferTooSmall { row_bytes, buffer_bytes });
    }
    let per_message = buffer_bytes / row_bytes;
    Ok(rows.div_ceil(per_message))
}

/// What the row-granular baseline would cost for the same rows.
pub fn rowwise_baseline_report(rows: u64, row_bytes: u64, channel: &ChannelModel, direction: Direction) -> TransferReport {
    let bytes = rows * row_bytes;
    TransferReport {
        direction,
        rows,
        bytes,
        messages: rows,
        modeled_time_s: channel.rowwise_time(rows, bytes),
        max_message_bytes: if rows > 0 { row_bytes } else { 0 },
    }
}

/// Staging area of a fixed byte budget, allocated once.
#[derive(Debug)]
pub struct TransferBuffer {
    capacity_bytes: u64,
    staging: Vec<f32>,
    peak_bytes: u64,
}

impl TransferBuffer {
    pub fn new(capacity_bytes: u64, row_bytes: u64) -> Result<Self, TransferError> {
        let rows = chunk_rows(capacity_bytes, row_bytes)?;
        let elems = rows as usize * (row_bytes as usize / ELEM_BYTES);
        Ok(Self { capacity_bytes, staging: vec![0.0; elems], peak_bytes: 0 })
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    /// Largest payload ever staged.
    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes
    }
}

fn chunk_rows(buffer_bytes: u64, row_bytes: u64) -> Result<u64, TransferError> {
    if row_bytes == 0 || row_bytes > buffer_bytes {
        return Err(TransferError::BufferTooSmall { row_bytes, buffer_bytes });
    }
    Ok(buffer_bytes / row_bytes)
}

/// Moves rows between one slow tier and one fast tier.
#[derive(Debug)]
pub struct Transmitter {
    buffer: TransferBuffer,
    channel: ChannelModel,
    mode: TransferMode,
    dim: usize,
}

impl Transmitter {
    pub fn new(dim: usize, buffer_bytes: u64, channel: ChannelModel, mode: TransferMode) -> Result<Self, TransferError> {
        channel.validate()?;
        let row_bytes = (dim * ELEM_BYTES) as u64;
        Ok(Self { buffer: TransferBuffer::new(buffer_bytes, row_bytes)?, channel, mode, dim })
    }

    pub fn row_bytes(&self) -> u64 {
        (self.dim * ELEM_BYTES) as u64
    }

    pub fn buffer(&self) -> &TransferBuffer {
        &self.buffer
    }

    pub fn channel(&self) -> &ChannelModel {
        &self.channel
    }

    pub fn mode(&self) -> TransferMode {
        self.mode
    }

    fn rows_per_message(&self) -> usize {
        match self.mode {
            TransferMode::Block => (self.buffer.capacity_bytes / self.row_bytes()) as usize,
            TransferMode::RowWise => 1,
        }
    }

    fn report(&self, direction: Direction, rows: usize, max_message_bytes: u64) -> TransferReport {
        let rows = rows as u64;
        let bytes = rows * self.row_bytes();
        let (messages, modeled_time_s) = match self.mode {
            TransferMode::Block => {
                let m = rows.div_ceil(self.rows_per_message() as u64);
                (m, if rows == 0 { 0.0 } else { self.channel.block_time(m, bytes) })
            }
            TransferMode::RowWise => (rows, self.channel.rowwise_time(rows, bytes)),
        };
        TransferReport { direction, rows, bytes, messages, modeled_time_s, max_message_bytes }
    }

    /// Generic staged copy: for each message, pack `count` source rows into
    /// the staging buffer, then unpack them into their targets.
    fn staged_copy(
        &mut self,
        n: usize,
        mut pack: impl FnMut(usize, &mut [f32]),
        mut unpack: impl FnMut(usize, &[f32]),
    ) -> u64 {
        let per_msg = self.rows_per_message();
        let dim = self.dim;
        let mut max_msg = 0u64;
        let mut start = 0;
        while start < n {
            let count = per_msg.min(n - start);
            let payload = (count * dim * ELEM_BYTES) as u64;
            assert!(payload <= self.buffer.capacity_bytes, "message payload {payload} exceeds buffer");
            let stage = &mut self.buffer.staging[..count * dim];
            for (k, dst) in stage.chunks_exact_mut(dim).enumerate() {
                pack(start + k, dst);
            }
            for (k, src) in stage.chunks_exact(dim).enumerate() {
                unpack(start + k, src);
            }
            max_msg = max_msg.max(payload);
            self.buffer.peak_bytes = self.buffer.peak_bytes.max(payload);
            start += count;
        }
        max_msg
    }

    /// Copies slow rows `ranks[i]` into fast slots `slots[i]`.
    pub fn move_to_fast(
        &mut self,
        ranks: &[RowIdx],
        slots: &[Slot],
        slow: &SlowTierStore,
        fast: &mut FastTierStore,
    ) -> Result<TransferReport, TransferError> {
        if ranks.len() != slots.len() {
            return Err(TransferError::LengthMismatch { sources: ranks.len(), targets: slots.len() });
        }
        check_rows(ranks.iter().map(|r| r.0), slow.len())?;
        check_rows(slots.iter().map(|s| s.0), fast.len())?;
        check_dim(slow.dim(), self.dim)?;
        check_dim(fast.dim(), self.dim)?;
        let max_msg = self.staged_copy(
            ranks.len(),
            |i, dst| dst.copy_from_slice(slow.row(ranks[i])),
            |i, src| fast.row_mut(slots[i]).copy_from_slice(src),
        );
        Ok(self.report(Direction::ToFast, ranks.len(), max_msg))
    }

    /// Copies fast slots `slots[i]` back into slow rows `ranks[i]`.
    pub fn move_to_slow(
        &mut self,
        slots: &[Slot],
        ranks: &[RowIdx],
        fast: &FastTierStore,
        slow: &mut SlowTierStore,
    ) -> Result<TransferReport, TransferError> {
        if ranks.len() != slots.len() {
            return Err(TransferError::LengthMismatch { sources: slots.len(), targets: ranks.len() });
        }
        check_rows(slots.iter().map(|s| s.0), fast.len())?;
        check_rows(ranks.iter().map(|r| r.0), slow.len())?;
        check_dim(slow.dim(), self.dim)?;
        check_dim(fast.dim(), self.dim)?;
        let max_msg = self.staged_copy(
            slots.len(),
            |i, dst| dst.copy_from_slice(fast.row(slots[i])),
            |i, src| slow.row_mut(ranks[i]).copy_from_slice(src),
        );
        Ok(self.report(Direction::ToSlow, slots.len(), max_msg))
    }
}

fn check_rows(idx: impl Iterator<Item = u32>, len: usize) -> Result<(), TransferError> {
    for i in idx {
        if i as usize >= len {
            return Err(StoreError::OutOfRange { index: i, len }.into());
        }
    }
    Ok(())
}

fn check_dim(store_dim: usize, dim: usize) -> Result<(), TransferError> {
    if store_dim != dim {
        return Err(StoreError::ShapeMismatch { want_rows: 0, want_dim: dim, got_rows: 0, got_dim: store_dim }.into());
    }
    Ok(())
}
