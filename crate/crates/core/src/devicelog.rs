//! On-device history of a client's transmitted updates.
//!
//! Each simulated device keeps one append-only file. Only the top `α`
//! fraction of the round's item-row deltas (by Euclidean norm) are kept;
//! dense deltas and a snapshot of the user embedding are stored in full.
//!
//! File layout, little-endian: magic `FRULOG1`, then records
//! `[u32 length | u32 round | payload | u32 crc32(round ‖ payload)]` where
//! `length` is the payload size and the payload is
//! `u32 rows, rows × (u32 item_id, e × f32), u32 tensors,
//! tensors × (u32 len, len × f32), e × f32 user embedding`.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::RowDeltas;

pub const LOG_MAGIC: &[u8; 7] = b"FRULOG1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Importance,
    Random,
}

fn default_keep_fraction() -> f64 {
    0.5
}
fn default_selection_mode() -> SelectionMode {
    SelectionMode::Importance
}
fn default_sync() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogConfig {
    /// Fraction α of item-row deltas kept per round.
    #[serde(default = "default_keep_fraction")]
    pub keep_fraction: f64,
    #[serde(default = "default_selection_mode")]
    pub selection_mode: SelectionMode,
    /// fsync each appended record.
    #[serde(default = "default_sync")]
    pub sync: bool,
}

impl Default for LogConfig {
    fn default() -> Self {
        Self {
            keep_fraction: default_keep_fraction(),
            selection_mode: default_selection_mode(),
            sync: default_sync(),
        }
    }
}

impl LogConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config("keep_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// `ceil(α·m)`, tolerant of representation error in `α·m`.
pub fn keep_count(m: usize, alpha: f64) -> usize {
    ((alpha * m as f64 - 1e-9).ceil().max(0.0) as usize).min(m)
}

fn squared_norm(row: &[f32]) -> f64 {
    row.iter().map(|v| f64::from(*v) * f64::from(*v)).sum()
}

/// Ids of the `ceil(α·m)` rows with the largest Euclidean norm, ascending;
/// ties go to the smaller id.
pub fn important_ids(deltas: &RowDeltas, alpha: f64) -> Vec<u32> {
    top_by_norm(
        deltas
            .iter()
            .map(|(&id, row)| (squared_norm(row), id))
            .collect(),
        alpha,
    )
}

/// Ids of the `ceil(α·m)` largest `(squared norm, id)` pairs, ascending;
/// ties go to the smaller id.
pub(crate) fn top_by_norm(mut ranked: Vec<(f64, u32)>, alpha: f64) -> Vec<u32> {
    let keep = keep_count(ranked.len(), alpha);
    if keep < ranked.len() && keep > 0 {
        ranked.select_nth_unstable_by(keep - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    }
    ranked.truncate(keep);
    let mut ids: Vec<u32> = ranked.into_iter().map(|(_, id)| id).collect();
    ids.sort_unstable();
    ids
}

/// Keeps the `ceil(α·m)` rows with the largest Euclidean norm; ties go to the smaller id.
pub fn select_important(deltas: &RowDeltas, alpha: f64) -> RowDeltas {
    important_ids(deltas, alpha)
        .into_iter()
        .map(|id| (id, deltas[&id].clone()))
        .collect()
}

/// In-place form of [`select_important`].
pub fn retain_important(deltas: &mut RowDeltas, alpha: f64) {
    let ids = important_ids(deltas, alpha);
    deltas.retain(|id, _| ids.binary_search(id).is_ok());
}

/// Keeps a uniformly random `ceil(α·m)` subset of rows.
pub fn select_random<R: Rng + ?Sized>(deltas: &RowDeltas, alpha: f64, rng: &mut R) -> RowDeltas {
    let keep = keep_count(deltas.len(), alpha);
    if keep == deltas.len() {
        return deltas.clone();
    }
    let ids: Vec<u32> = deltas.keys().copied().collect();
    index::sample(rng, ids.len(), keep)
        .into_iter()
        .map(|i| (ids[i], deltas[&ids[i]].clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub round: u32,
    pub item_deltas: RowDeltas,
    /// Dense tensors in canonical order (empty for LightGCN).
    pub dense_deltas: Vec<Vec<f32>>,
    pub user_embedding: Vec<f32>,
}

impl LogEntry {
    fn encode_payload(&self, e: usize) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(8 + self.item_deltas.len() * (4 + 4 * e) + 4 * e);
        out.extend_from_slice(&(self.item_deltas.len() as u32).to_le_bytes());
        for (id, row) in &self.item_deltas {
            if row.len() != e {
                return Err(Error::Shape(format!(
                    "row {id} has length {}, expected {e}",
                    row.len()
                )));
            }
            out.extend_from_slice(&id.to_le_bytes());
            row.iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out.extend_from_slice(&(self.dense_deltas.len() as u32).to_le_bytes());
        for t in &self.dense_deltas {
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            t.iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        if self.user_embedding.len() != e {
            return Err(Error::Shape(format!(
                "user embedding has length {}, expected {e}",
                self.user_embedding.len()
            )));
        }
        self.user_embedding
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        Ok(out)
    }

    fn decode_payload(round: u32, buf: &[u8], e: usize) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&end| end <= buf.len());
            let end =
                end.ok_or_else(|| Error::Format("log payload shorter than declared".into()))?;
            let s = &buf[pos..end];
            pos = end;
            Ok(s)
        };
        fn u32_of(b: &[u8]) -> u32 {
            u32::from_le_bytes(b.try_into().unwrap())
        }
        fn f32s(b: &[u8]) -> Vec<f32> {
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        let rows = u32_of(take(4)?) as usize;
        let mut item_deltas = RowDeltas::new();
        for _ in 0..rows {
            let id = u32_of(take(4)?);
            item_deltas.insert(id, f32s(take(4 * e)?));
        }
        let tensors = u32_of(take(4)?) as usize;
        let mut dense_deltas = Vec::with_capacity(tensors);
        for _ in 0..tensors {
            let len = u32_of(take(4)?) as usize;
            dense_deltas.push(f32s(take(
                len.checked_mul(4)
                    .ok_or_else(|| Error::Format("tensor too large".into()))?,
            )?));
        }
        let user_embedding = f32s(take(4 * e)?);
        if pos != buf.len() {
            return Err(Error::Format("trailing bytes in log payload".into()));
        }
        Ok(Self {
            round,
            item_deltas,
            dense_deltas,
            user_embedding,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct IndexEntry {
    round: u32,
    offset: u64,
    payload_len: u32,
    rows: u32,
}

/// One client's log file plus an in-memory index of its valid records.
#[derive(Debug)]
pub struct DeviceLog {
    owner: u32,
    path: PathBuf,
    embedding_size: usize,
    index: Vec<IndexEntry>,
    end: u64,
    sync: bool,
    /// File contents, kept after `open` so reads need no further IO.
    contents: Option<Vec<u8>>,
}

const HEADER_LEN: u64 = LOG_MAGIC.len() as u64;

impl DeviceLog {
    /// Creates (or truncates) the log file.
    pub fn create(path: impl Into<PathBuf>, owner: u32, embedding_size: usize) -> Result<Self> {
        let path = path.into();
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(LOG_MAGIC).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            owner,
            path,
            embedding_size,
            index: Vec::new(),
            end: HEADER_LEN,
            sync: true,
            contents: None,
        })
    }

    /// Opens an existing log, dropping a torn or corrupt tail.
    pub fn open(path: impl Into<PathBuf>, owner: u32, embedding_size: usize) -> Result<Self> {
        let path = path.into();
        let mut buf = Vec::new();
        File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(&path, e))?;
        if buf.len() < LOG_MAGIC.len() || &buf[..LOG_MAGIC.len()] != LOG_MAGIC {
            return Err(Error::DeviceLog {
                client: owner,
                message: "bad log magic".into(),
            });
        }
        let mut index = Vec::new();
        let mut pos = LOG_MAGIC.len();
        let mut last_round = 0u32;
        while pos + 8 <= buf.len() {
            let len = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
            let round = u32::from_le_bytes(buf[pos + 4..pos + 8].try_into().unwrap());
            let end = pos + 8 + len + 4;
            if end > buf.len() {
                break;
            }
            let stored = u32::from_le_bytes(buf[end - 4..end].try_into().unwrap());
            if crc32fast::hash(&buf[pos + 4..end - 4]) != stored || round <= last_round {
                break;
            }
            let rows = u32::from_le_bytes(buf[pos + 8..pos + 12].try_into().unwrap_or([0; 4]));
            index.push(IndexEntry {
                round,
                offset: pos as u64,
                payload_len: len as u32,
                rows,
            });
            last_round = round;
            pos = end;
        }
        if pos != buf.len() {
            log::warn!(
                "device log {}: dropping {} bytes of incomplete or corrupt records",
                path.display(),
                buf.len() - pos
            );
            let f = OpenOptions::new()
                .write(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            f.set_len(pos as u64).map_err(|e| Error::io(&path, e))?;
            buf.truncate(pos);
        }
        Ok(Self {
            owner,
            path,
            embedding_size,
            index,
            end: pos as u64,
            sync: true,
            contents: Some(buf),
        })
    }

    pub fn set_sync(&mut self, sync: bool) {
        self.sync = sync;
    }

    pub fn owner(&self) -> u32 {
        self.owner
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn rounds(&self) -> Vec<u32> {
        self.index.iter().map(|e| e.round).collect()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Total item rows stored across all entries.
    pub fn stored_rows(&self) -> usize {
        self.index.iter().map(|e| e.rows as usize).sum()
    }

    pub fn stored_bytes(&self) -> u64 {
        self.end
    }

    /// Appends one entry and makes it durable before returning.
    pub fn append(&mut self, entry: &LogEntry) -> Result<()> {
        if let Some(last) = self.index.last() {
            if entry.round <= last.round {
                return Err(Error::DeviceLog {
                    client: self.owner,
                    message: format!("round {} appended after round {}", entry.round, last.round),
                });
            }
        }
        let payload = entry.encode_payload(self.embedding_size)?;
        let mut record = Vec::with_capacity(payload.len() + 12);
        record.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        record.extend_from_slice(&entry.round.to_le_bytes());
        record.extend_from_slice(&payload);
        let crc = crc32fast::hash(&record[4..]);
        record.extend_from_slice(&crc.to_le_bytes());

        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(&record).map_err(|e| Error::io(&self.path, e))?;
        if self.sync {
            f.sync_data().map_err(|e| Error::io(&self.path, e))?;
        }
        if let Some(c) = self.contents.as_mut() {
            c.extend_from_slice(&record);
        }
        self.index.push(IndexEntry {
            round: entry.round,
            offset: self.end,
            payload_len: payload.len() as u32,
            rows: entry.item_deltas.len() as u32,
        });
        self.end += record.len() as u64;
        Ok(())
    }

    /// The entry stored for `round`, or `None` if the client did not take part.
    pub fn fetch(&self, round: u32) -> Result<Option<LogEntry>> {
        let Ok(i) = self.index.binary_search_by(|e| e.round.cmp(&round)) else {
            return Ok(None);
        };
        let ie = self.index[i];
        let start = ie.offset as usize + 8;
        let len = ie.payload_len as usize + 4;
        let read;
        let record: &[u8] = match &self.contents {
            Some(c) => &c[start..start + len],
            None => {
                let mut f = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
                f.seek(SeekFrom::Start(start as u64))
                    .map_err(|e| Error::io(&self.path, e))?;
                let mut buf = vec![0u8; len];
                f.read_exact(&mut buf)
                    .map_err(|e| Error::io(&self.path, e))?;
                read = buf;
                &read
            }
        };
        let (payload, crc_bytes) = record.split_at(ie.payload_len as usize);
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&round.to_le_bytes());
        hasher.update(payload);
        if hasher.finalize() != u32::from_le_bytes(crc_bytes.try_into().unwrap()) {
            return Err(Error::DeviceLog {
                client: self.owner,
                message: format!("checksum mismatch in round {round}"),
            });
        }
        LogEntry::decode_payload(round, payload, self.embedding_size).map(Some)
    }

    pub fn entries(&self) -> Result<Vec<LogEntry>> {
        self.index
            .iter()
            .map(|e| self.fetch(e.round).map(|o| o.expect("indexed round")))
            .collect()
    }
}

pub fn log_path(root: &Path, client: u32) -> PathBuf {
    root.join(format!("client_{client:06}.frulog"))
}

/// Inputs to the closed-form storage estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageInputs {
    pub global_rounds: usize,
    /// Percentage of clients selected per round (b).
    pub client_fraction: f64,
    pub keep_fraction: f64,
    pub shrink_factor: f64,
    pub negative_ratio: usize,
    pub average_positives: f64,
    pub item_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoragePrediction {
    /// `b%·B·α(1+βn)·|V_k^pos|`, in units of one item-row delta.
    pub cost_per_client: f64,
    /// Cost of logging the whole item table every participation, `b%·B·|V|`.
    pub full_logging_cost: f64,
    /// `cost_per_client / |V|`: extra space relative to the item table a client already holds.
    pub overhead_vs_item_table: f64,
    /// `cost_per_client / full_logging_cost`.
    pub fraction_of_full_logging: f64,
}

pub fn predict_storage(inputs: &StorageInputs) -> StoragePrediction {
    let participations = inputs.client_fraction / 100.0 * inputs.global_rounds as f64;
    let cost = participations
        * inputs.keep_fraction
        * (1.0 + inputs.shrink_factor * inputs.negative_ratio as f64)
        * inputs.average_positives;
    let full = participations * inputs.item_count as f64;
    StoragePrediction {
        cost_per_client: cost,
        full_logging_cost: full,
        overhead_vs_item_table: cost / inputs.item_count as f64,
        fraction_of_full_logging: if full > 0.0 { cost / full } else { 0.0 },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientStorage {
    pub client: u32,
    pub positives: usize,
    pub participations: usize,
    /// Closed-form expectation for this client's positive count.
    pub predicted_rows: f64,
    /// Upper bound given the client's actual participations:
    /// `participations · ceil(α·(|pos| + round(β·n·|pos|)))`.
    pub bound_rows: usize,
    pub measured_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub prediction: StoragePrediction,
    pub clients: Vec<ClientStorage>,
    /// Bytes of dense deltas and user snapshots, reported apart from item rows.
    pub dense_overhead_bytes: u64,
}

impl StorageReport {
    pub fn violations(&self) -> impl Iterator<Item = &ClientStorage> {
        self.clients
            .iter()
            .filter(|c| c.measured_rows > c.bound_rows)
    }
}
