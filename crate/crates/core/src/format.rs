//! The CACF columnar event-file format and the [`ColumnBatch`] it decodes to.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CACF" | version u32 = 1 | n_columns u32 | n_events u64
//! per column: name_len u16 | UTF-8 name
//! per column, in header order: n_events x f64
//! ```
//!
//! Readers go through [`RangeRead`], so the same decoder serves local files
//! and byte ranges fetched through the caching data proxy.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use thiserror::Error;

use crate::dataset::FileChunk;

pub const MAGIC: &[u8; 4] = b"CACF";
pub const VERSION: u32 = 1;
pub const MAX_COLUMN_NAME: usize = 64;

const FIXED_HEADER: u64 = 4 + 4 + 4 + 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("empty column set")]
    EmptyColumnSet,
    #[error("unequal column lengths")]
    UnequalColumnLengths,
    #[error("invalid column name {0:?}")]
    InvalidColumnName(String),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("truncated file")]
    Truncated,
    #[error("unknown column {0}")]
    UnknownColumn(String),
    #[error("chunk out of range")]
    ChunkOutOfRange,
    #[error("{0}")]
    Source(String),
}

impl From<std::io::Error> for FormatError {
    fn from(e: std::io::Error) -> Self {
        FormatError::Source(e.to_string())
    }
}

/// Where a batch came from: file path and index of its first event.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BatchOrigin {
    pub file: String,
    pub start: u64,
}

/// Named f64 columns covering a contiguous range of events.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnBatch {
    columns: BTreeMap<String, Vec<f64>>,
    n_events: usize,
    origin: BatchOrigin,
}

impl ColumnBatch {
    /// Builds a batch, checking names and column lengths. An empty column map
    /// yields an empty batch with `n_events = 0`.
    pub fn new(columns: BTreeMap<String, Vec<f64>>) -> Result<Self, FormatError> {
        let n_events = columns.values().next().map_or(0, Vec::len);
        Self::with_len(columns, n_events, BatchOrigin::default())
    }

    /// Like [`ColumnBatch::new`] but with an explicit event count, which
    /// lets a batch carry events even when no columns were requested.
    pub fn with_len(
        columns: BTreeMap<String, Vec<f64>>,
        n_events: usize,
        origin: BatchOrigin,
    ) -> Result<Self, FormatError> {
        for (name, values) in &columns {
            validate_name(name)?;
            if values.len() != n_events {
                return Err(FormatError::UnequalColumnLengths);
            }
        }
        Ok(Self {
            columns,
            n_events,
            origin,
        })
    }

    pub fn n_events(&self) -> usize {
        self.n_events
    }

    pub fn origin(&self) -> &BatchOrigin {
        &self.origin
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.get(name).map(Vec::as_slice)
    }

    pub fn columns(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.columns
    }

    pub fn into_columns(self) -> BTreeMap<String, Vec<f64>> {
        self.columns
    }
}

fn validate_name(name: &str) -> Result<(), FormatError> {
    if name.is_empty() || name.len() > MAX_COLUMN_NAME || !name.is_ascii() {
        return Err(FormatError::InvalidColumnName(name.to_owned()));
    }
    Ok(())
}

/// Random-access byte source keyed by path. Reads past EOF return a short
/// (possibly empty) buffer rather than an error.
pub trait RangeRead: Send + Sync {
    fn read_at(&self, path: &str, offset: u64, len: u64) -> Result<Vec<u8>, FormatError>;
}

/// Reads straight from the local filesystem.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalFiles;

impl RangeRead for LocalFiles {
    fn read_at(&self, path: &str, offset: u64, len: u64) -> Result<Vec<u8>, FormatError> {
        let mut file = File::open(path)?;
        let size = file.metadata()?.len();
        if offset >= size {
            return Ok(Vec::new());
        }
        let len = len.min(size - offset);
        file.seek(SeekFrom::Start(offset))?;
        let mut buf = vec![0u8; len as usize];
        file.read_exact(&mut buf)?;
        Ok(buf)
    }
}

/// Parsed CACF header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacfHeader {
    pub n_events: u64,
    pub columns: Vec<String>,
    /// Byte offset of the first payload value.
    pub payload_offset: u64,
}

impl CacfHeader {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Byte range `(offset, len)` holding events `[start, start + len)` of column `idx`.
    pub fn value_range(&self, idx: usize, start: u64, len: u64) -> (u64, u64) {
        let col_base = self.payload_offset + idx as u64 * self.n_events * 8;
        (col_base + start * 8, len * 8)
    }

    pub fn file_len(&self) -> u64 {
        self.payload_offset + self.columns.len() as u64 * self.n_events * 8
    }
}

/// Serializes columns to CACF bytes (header order = map order).
pub fn encode_dataset(columns: &BTreeMap<String, Vec<f64>>) -> Result<Vec<u8>, FormatError> {
    let n_events = match columns.values().next() {
        None => return Err(FormatError::EmptyColumnSet),
        Some(v) => v.len(),
    };
    for (name, values) in columns {
        validate_name(name)?;
        if values.len() != n_events {
            return Err(FormatError::UnequalColumnLengths);
        }
    }
    let header_len: usize = columns.keys().map(|n| 2 + n.len()).sum::<usize>() + FIXED_HEADER as usize;
    let mut out = Vec::with_capacity(header_len + columns.len() * n_events * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(columns.len() as u32).to_le_bytes());
    out.extend_from_slice(&(n_events as u64).to_le_bytes());
    for name in columns.keys() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    for values in columns.values() {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes a CACF file and returns the number of bytes written.
pub fn write_dataset_file(
    columns: &BTreeMap<String, Vec<f64>>,
    path: impl AsRef<Path>,
) -> Result<u64, FormatError> {
    let bytes = encode_dataset(columns)?;
    let mut file = File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(bytes.len() as u64)
}

/// Reads and validates the header of `path` from `source`.
pub fn read_header(source: &dyn RangeRead, path: &str) -> Result<CacfHeader, FormatError> {
    let fixed = source.read_at(path, 0, FIXED_HEADER)?;
    if fixed.len() < 4 || &fixed[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if fixed.len() < FIXED_HEADER as usize {
        return Err(FormatError::Truncated);
    }
    let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let n_columns = u32::from_le_bytes(fixed[8..12].try_into().unwrap()) as u64;
    let n_events = u64::from_le_bytes(fixed[12..20].try_into().unwrap());

    // Names are bounded, so one read covers every possible name table.
    let max_names = n_columns * (2 + MAX_COLUMN_NAME as u64);
    let names = source.read_at(path, FIXED_HEADER, max_names)?;
    let mut pos = 0usize;
    let mut columns = Vec::with_capacity(n_columns as usize);
    for _ in 0..n_columns {
        let len_bytes = names.get(pos..pos + 2).ok_or(FormatError::Truncated)?;
        let len = u16::from_le_bytes([len_bytes[0], len_bytes[1]]) as usize;
        pos += 2;
        let raw = names.get(pos..pos + len).ok_or(FormatError::Truncated)?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| FormatError::InvalidColumnName(String::from_utf8_lossy(raw).into_owned()))?;
        columns.push(name.to_owned());
        pos += len;
    }
    Ok(CacfHeader {
        n_events,
        columns,
        payload_offset: FIXED_HEADER + pos as u64,
    })
}

/// Reads `chunk` from `path` through `source`, keeping only `wanted` columns.
pub fn read_chunk_from(
    source: &dyn RangeRead,
    path: &str,
    chunk: &FileChunk,
    wanted: &BTreeSet<String>,
) -> Result<ColumnBatch, FormatError> {
    let header = read_header(source, path)?;
    let end = chunk.start.checked_add(chunk.len).ok_or(FormatError::ChunkOutOfRange)?;
    if end > header.n_events {
        return Err(FormatError::ChunkOutOfRange);
    }
    let mut columns = BTreeMap::new();
    for name in wanted {
        let idx = header
            .column_index(name)
            .ok_or_else(|| FormatError::UnknownColumn(name.clone()))?;
        let (offset, len) = header.value_range(idx, chunk.start, chunk.len);
        let bytes = source.read_at(path, offset, len)?;
        if bytes.len() as u64 != len {
            return Err(FormatError::Truncated);
        }
        let values = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        columns.insert(name.clone(), values);
    }
    ColumnBatch::with_len(
        columns,
        chunk.len as usize,
        BatchOrigin {
            file: path.to_owned(),
            start: chunk.start,
        },
    )
}

/// Reads a chunk from a local CACF file.
pub fn read_chunk(
    path: impl AsRef<Path>,
    chunk: &FileChunk,
    wanted: &BTreeSet<String>,
) -> Result<ColumnBatch, FormatError> {
    let path = path.as_ref().to_string_lossy().into_owned();
    read_chunk_from(&LocalFiles, &path, chunk, wanted)
}

/// Reads every event and column of a local file.
pub fn read_dataset_file(path: impl AsRef<Path>) -> Result<ColumnBatch, FormatError> {
    let path = path.as_ref().to_string_lossy().into_owned();
    let header = read_header(&LocalFiles, &path)?;
    let wanted = header.columns.iter().cloned().collect();
    let chunk = FileChunk {
        file: path.clone(),
        start: 0,
        len: header.n_events,
        chunk_id: 0,
    };
    read_chunk_from(&LocalFiles, &path, &chunk, &wanted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cols(pairs: &[(&str, Vec<f64>)]) -> BTreeMap<String, Vec<f64>> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn chunk(path: &Path, start: u64, len: u64) -> FileChunk {
        FileChunk {
            file: path.to_string_lossy().into_owned(),
            start,
            len,
            chunk_id: 0,
        }
    }

    #[test]
    fn single_column_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.cacf");
        let input = cols(&[("pt", vec![1.0, 2.0, 3.0])]);
        let written = write_dataset_file(&input, &path).unwrap();
        assert_eq!(written, std::fs::metadata(&path).unwrap().len());
        let back = read_dataset_file(&path).unwrap();
        assert_eq!(back.n_events(), 3);
        assert_eq!(back.columns(), &input);
    }

    #[test]
    fn rejects_empty_and_ragged_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.cacf");
        let err = write_dataset_file(&BTreeMap::new(), &path).unwrap_err();
        assert_eq!(err.to_string(), "empty column set");
        let err = write_dataset_file(&cols(&[("a", vec![1.0, 2.0]), ("b", vec![3.0])]), &path)
            .unwrap_err();
        assert_eq!(err.to_string(), "unequal column lengths");
    }

    #[test]
    fn chunk_slicing_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.cacf");
        write_dataset_file(&cols(&[("pt", vec![1.0, 2.0, 3.0, 4.0])]), &path).unwrap();
        let want: BTreeSet<String> = ["pt".to_string()].into();

        let batch = read_chunk(&path, &chunk(&path, 1, 2), &want).unwrap();
        assert_eq!(batch.column("pt").unwrap(), &[2.0, 3.0]);
        assert_eq!(batch.origin().start, 1);

        let err = read_chunk(&path, &chunk(&path, 3, 2), &want).unwrap_err();
        assert_eq!(err.to_string(), "chunk out of range");

        let mass: BTreeSet<String> = ["mass".to_string()].into();
        let err = read_chunk(&path, &chunk(&path, 0, 1), &mass).unwrap_err();
        assert_eq!(err.to_string(), "unknown column mass");
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let bytes = encode_dataset(&cols(&[("ab", vec![1.5])])).unwrap();
        let mut expected = b"CACF".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cacf");
        std::fs::write(&path, b"GIF89a-and-more-bytes-here").unwrap();
        let p = path.to_string_lossy();
        assert_eq!(read_header(&LocalFiles, &p).unwrap_err(), FormatError::BadMagic);

        let mut bytes = encode_dataset(&cols(&[("a", vec![0.0])])).unwrap();
        bytes[4] = 2;
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(read_header(&LocalFiles, &p).unwrap_err(), FormatError::BadVersion(2));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            n in 0usize..64,
            ncols in 1usize..5,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut input = BTreeMap::new();
            for c in 0..ncols {
                // Arbitrary bit patterns, NaN payloads and infinities included.
                let values: Vec<f64> = (0..n).map(|_| f64::from_bits(rng.gen())).collect();
                input.insert(format!("c{c}"), values);
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.cacf");
            write_dataset_file(&input, &path).unwrap();
            let back = read_dataset_file(&path).unwrap();
            prop_assert_eq!(back.n_events(), n);
            for (name, values) in &input {
                let got = back.column(name).unwrap();
                let a: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
                let b: Vec<u64> = got.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}
