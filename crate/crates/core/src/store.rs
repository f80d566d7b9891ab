//! The two embedding tiers plus a dense reference store used as an oracle.
//!
//! The slow tier holds every row, ordered by frequency rank and indexed by
//! [`RowIdx`]. The fast tier is a fixed number of [`Slot`]s. The reference
//! store is indexed by [`RawId`] and never takes part in caching.

use crate::freq_stats::IdxMap;
use crate::ids::{RawId, RowIdx, Slot};
use crate::par;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("index {index} out of range for {len} rows")]
    OutOfRange { index: u32, len: usize },
    #[error("values shape {got_rows}x{got_dim} does not match {want_rows}x{want_dim}")]
    ShapeMismatch { want_rows: usize, want_dim: usize, got_rows: usize, got_dim: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed snapshot: {0}")]
    Format(String),
}

pub const ELEM_BYTES: usize = std::mem::size_of::<f32>();

/// Dense row-major `rows x dim` matrix of f32.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl RowMatrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self { dim, data: vec![0.0; rows * dim] }
    }

    pub fn from_vec(dim: usize, data: Vec<f32>) -> Result<Self, StoreError> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(StoreError::InvalidParam(format!("{} values do not form rows of {dim}", data.len())));
        }
        Ok(Self { dim, data })
    }

    pub fn with_capacity(rows: usize, dim: usize) -> Self {
        Self { dim, data: Vec::with_capacity(rows * dim) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push_row(&mut self, row: &[f32]) {
        debug_assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }

    pub fn clear(&mut self) {
        self.data.clear();
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * ELEM_BYTES
    }

    /// Columns `cols` of every row.
    pub fn column_slice(&self, cols: Range<usize>) -> RowMatrix {
        let mut out = RowMatrix::with_capacity(self.rows(), cols.len());
        for r in 0..self.rows() {
            out.push_row(&self.row(r)[cols.clone()]);
        }
        out
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_columns(parts: &[RowMatrix]) -> Result<RowMatrix, StoreError> {
        let rows = parts.first().map_or(0, RowMatrix::rows);
        let dim: usize = parts.iter().map(RowMatrix::dim).sum();
        let mut out = RowMatrix::with_capacity(rows, dim);
        out.dim = dim;
        for p in parts {
            if p.rows() != rows {
                return Err(StoreError::ShapeMismatch { want_rows: rows, want_dim: p.dim, got_rows: p.rows(), got_dim: p.dim });
            }
        }
        for r in 0..rows {
            for p in parts {
                out.data.extend_from_slice(p.row(r));
            }
        }
        Ok(out)
    }

    fn check_shape(&self, rows: usize, dim: usize) -> Result<(), StoreError> {
        if self.rows() != rows || self.dim != dim {
            return Err(StoreError::ShapeMismatch { want_rows: rows, want_dim: dim, got_rows: self.rows(), got_dim: self.dim });
        }
        Ok(())
    }

    /// Snapshot file: magic, version, rows, dim, then the row-major f32 matrix,
    /// all little-endian.
    pub fn write_snapshot(&self, path: &Path) -> Result<(), StoreError> {
        let io = |source| StoreError::Io { path: path.to_path_buf(), source };
        let mut buf = Vec::with_capacity(24 + self.bytes());
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path).map_err(io)?.write_all(&buf).map_err(io)
    }

    pub fn read_snapshot(path: &Path) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io { path: path.to_path_buf(), source };
        let mut bytes = Vec::new();
        std::fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
        if bytes.len() < 24 || &bytes[..4] != SNAPSHOT_MAGIC {
            return Err(StoreError::Format("bad magic or truncated header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(StoreError::Format(format!("unsupported version {version}")));
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let dim = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let body = &bytes[24..];
        if dim == 0 || body.len() != rows * dim * ELEM_BYTES {
            return Err(StoreError::Format("matrix body length mismatch".into()));
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { dim, data })
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"FQSN";
const SNAPSHOT_VERSION: u32 = 1;

macro_rules! indexed_store {
    ($name:ident, $idx:ty) => {
        impl $name {
            pub fn dim(&self) -> usize {
                self.rows.dim()
            }

            pub fn len(&self) -> usize {
                self.rows.rows()
            }

            pub fn is_empty(&self) -> bool {
                self.len() == 0
            }

            pub fn matrix(&self) -> &RowMatrix {
                &self.rows
            }

            #[inline]
            fn check(&self, i: $idx) -> Result<usize, StoreError> {
                if i.index() < self.len() {
                    Ok(i.index())
                } else {
                    Err(StoreError::OutOfRange { index: i.0, len: self.len() })
                }
            }

            #[inline]
            pub fn row(&self, i: $idx) -> &[f32] {
                self.rows.row(i.index())
            }

            #[inline]
            pub fn row_mut(&mut self, i: $idx) -> &mut [f32] {
                self.rows.row_mut(i.index())
            }

            /// Copies the listed rows, in order, into a new matrix.
            pub fn read(&self, idx: &[$idx]) -> Result<RowMatrix, StoreError> {
                let mut out = RowMatrix::with_capacity(idx.len(), self.dim());
                out.dim = self.dim();
                for &i in idx {
                    out.push_row(self.rows.row(self.check(i)?));
                }
                Ok(out)
            }

            /// Overwrites the listed rows with `values` (one row per index).
            /// Nothing is written if any index is out of range.
            pub fn write(&mut self, idx: &[$idx], values: &RowMatrix) -> Result<(), StoreError> {
                values.check_shape(idx.len(), self.dim())?;
                for &i in idx {
                    self.check(i)?;
                }
                for (k, &i) in idx.iter().enumerate() {
                    self.rows.row_mut(i.index()).copy_from_slice(values.row(k));
                }
                Ok(())
            }
        }
    };
}

/// Every embedding row, ordered by frequency rank.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowTierStore {
    rows: RowMatrix,
}

/// The capacity-bounded fast tier.
#[derive(Debug, Clone, PartialEq)]
pub struct FastTierStore {
    rows: RowMatrix,
}

/// Dense store indexed by raw id, used only as an equivalence oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStore {
    rows: RowMatrix,
}

indexed_store!(SlowTierStore, RowIdx);
indexed_store!(FastTierStore, Slot);
indexed_store!(ReferenceStore, RawId);

impl FastTierStore {
    pub fn zeros(capacity: usize, dim: usize) -> Self {
        Self { rows: RowMatrix::zeros(capacity, dim) }
    }

    pub fn capacity(&self) -> usize {
        self.len()
    }

    /// Bytes of row storage: `capacity * dim * 4`.
    pub fn bytes(&self) -> usize {
        self.rows.bytes()
    }
}

impl SlowTierStore {
    pub fn from_matrix(rows: RowMatrix) -> Self {
        Self { rows }
    }
}

impl ReferenceStore {
    pub fn from_matrix(rows: RowMatrix) -> Self {
        Self { rows }
    }

    /// Reference rows for columns `cols` of a `dim`-wide table, at raw-id positions.
    pub fn init_columns(num_ids: u32, dim: usize, cols: Range<usize>, seed: u64) -> Self {
        let width = cols.len();
        let mut rows = RowMatrix::zeros(num_ids as usize, width);
        fill_rows(&mut rows, dim, cols, seed, |r| RawId(r as u32));
        Self { rows }
    }

    pub fn init(num_ids: u32, dim: usize, seed: u64) -> Self {
        Self::init_columns(num_ids, dim, 0..dim, seed)
    }
}

/// Fast-tier row count for `cache_ratio` of `num_ids`, floored and clamped to
/// at least one row.
pub fn fast_capacity(num_ids: u32, cache_ratio: f64) -> usize {
    let raw = cache_ratio * num_ids as f64;
    let rounded = raw.round();
    let floored = if (raw - rounded).abs() <= 1e-9 * raw.max(1.0) { rounded } else { raw.floor() };
    let cap = (floored.max(0.0) as usize).min(num_ids as usize);
    if cap == 0 {
        log::warn!("cache ratio {cache_ratio} of {num_ids} ids gives 0 rows; clamping capacity to 1");
        1
    } else {
        cap
    }
}

/// Initial value of element `col` of raw id `id`'s row: seeded uniform in
/// `[-0.5/dim, 0.5/dim)`. Depends only on `(seed, id, col, dim)`, so any
/// column slice of the table can be produced independently.
fn fill_row(seed: u64, id: RawId, dim: usize, cols: Range<usize>, out: &mut [f32]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id.0 as u64);
    rng.set_word_pos(cols.start as u128);
    let half = 0.5f32 / dim as f32;
    for v in out.iter_mut() {
        let unit = (rng.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0);
        *v = (2.0 * unit - 1.0) * half;
    }
}

fn fill_rows(rows: &mut RowMatrix, dim: usize, cols: Range<usize>, seed: u64, id_at: impl Fn(usize) -> RawId + Sync) {
    let width = cols.len();
    if width == 0 {
        return;
    }
    const ROWS_PER_TASK: usize = 4096;
    par::for_each_chunk_mut(rows.as_mut_slice(), ROWS_PER_TASK * width, |chunk, block| {
        for (k, out) in block.chunks_mut(width).enumerate() {
            fill_row(seed, id_at(chunk * ROWS_PER_TASK + k), dim, cols.clone(), out);
        }
    });
}

fn validate_shape(num_ids: usize, dim: usize, cache_ratio: f64) -> Result<(), StoreError> {
    if num_ids == 0 {
        return Err(StoreError::InvalidParam("num_ids must be >= 1".into()));
    }
    if dim == 0 {
        return Err(StoreError::InvalidParam("embedding_dim must be >= 1".into()));
    }
    if !(cache_ratio > 0.0 && cache_ratio <= 1.0) {
        return Err(StoreError::InvalidParam(format!("cache ratio {cache_ratio} not in (0, 1]")));
    }
    Ok(())
}

/// Rows for columns `cols` of a `dim`-wide table where row `r` holds the
/// initial values of raw id `id_at(r)`.
pub fn init_rows(num_rows: usize, dim: usize, cols: Range<usize>, seed: u64, id_at: impl Fn(usize) -> RawId + Sync) -> RowMatrix {
    let mut rows = RowMatrix::zeros(num_rows, cols.len());
    fill_rows(&mut rows, dim, cols, seed, id_at);
    rows
}

/// Slow tier for columns `cols` of a `dim`-wide table: row `rank_of[id]`
/// holds id's initial values.
pub fn init_slow_columns(idx_map: &IdxMap, dim: usize, cols: Range<usize>, seed: u64) -> SlowTierStore {
    let mut rows = RowMatrix::zeros(idx_map.len(), cols.len());
    fill_rows(&mut rows, dim, cols, seed, |r| idx_map.id_of(RowIdx(r as u32)));
    SlowTierStore { rows }
}

/// Builds the slow tier (frequency-ordered), the zeroed fast tier and the
/// raw-id-ordered reference store, all from the same seeded values.
pub fn init_stores(
    idx_map: &IdxMap,
    dim: usize,
    cache_ratio: f64,
    seed: u64,
) -> Result<(SlowTierStore, FastTierStore, ReferenceStore), StoreError> {
    validate_shape(idx_map.len(), dim, cache_ratio)?;
    let num_ids = idx_map.len() as u32;
    let slow = init_slow_columns(idx_map, dim, 0..dim, seed);
    let fast = FastTierStore::zeros(fast_capacity(num_ids, cache_ratio), dim);
    let reference = ReferenceStore::init(num_ids, dim, seed);
    Ok((slow, fast, reference))
}

pub fn validate_store_params(num_ids: usize, dim: usize, cache_ratio: f64) -> Result<(), StoreError> {
    validate_shape(num_ids, dim, cache_ratio)
}
