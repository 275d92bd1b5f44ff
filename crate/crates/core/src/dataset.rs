//! Datasets, file chunks and chunk planning.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{read_header, write_dataset_file, FormatError, RangeRead};

pub const DEFAULT_CHUNK_SIZE: u64 = 5_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("chunk_size must be at least 1")]
    ZeroChunkSize,
    #[error("dataset {0:?} has no files")]
    NoFiles(String),
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("file {path}: {source}")]
    File { path: String, source: FormatError },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub path: String,
    pub n_events: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub files: Vec<DatasetFile>,
    pub n_events_total: u64,
}

impl DatasetSpec {
    pub fn new(name: impl Into<String>, files: Vec<DatasetFile>) -> Result<Self, DatasetError> {
        let name = name.into();
        if files.is_empty() {
            return Err(DatasetError::NoFiles(name));
        }
        let n_events_total = files.iter().map(|f| f.n_events).sum();
        Ok(Self {
            name,
            files,
            n_events_total,
        })
    }

    /// Builds a spec by reading each file's header through `source`.
    pub fn from_headers(
        name: impl Into<String>,
        paths: &[String],
        source: &dyn RangeRead,
    ) -> Result<Self, DatasetError> {
        let files = paths
            .iter()
            .map(|p| {
                read_header(source, p)
                    .map(|h| DatasetFile {
                        path: p.clone(),
                        n_events: h.n_events,
                    })
                    .map_err(|source| DatasetError::File {
                        path: p.clone(),
                        source,
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(name, files)
    }
}

/// A contiguous event range of one file; the unit of task distribution.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FileChunk {
    pub file: String,
    pub start: u64,
    pub len: u64,
    pub chunk_id: u64,
}

/// Splits every file into `chunk_size` pieces (the last piece of a file may
/// be shorter). Chunk ids run 0..N-1 in file order.
pub fn plan_chunks(dataset: &DatasetSpec, chunk_size: u64) -> Result<Vec<FileChunk>, DatasetError> {
    if chunk_size == 0 {
        return Err(DatasetError::ZeroChunkSize);
    }
    if dataset.files.is_empty() {
        return Err(DatasetError::NoFiles(dataset.name.clone()));
    }
    let mut chunks = Vec::new();
    for file in &dataset.files {
        let mut start = 0;
        while start < file.n_events {
            let len = chunk_size.min(file.n_events - start);
            chunks.push(FileChunk {
                file: file.path.clone(),
                start,
                len,
                chunk_id: chunks.len() as u64,
            });
            start += len;
        }
    }
    Ok(chunks)
}

/// A synthetic dataset of `n_files` equal files with names only (no bytes),
/// used by the virtual-clock benchmark where compute is simulated.
pub fn synthetic_spec(name: &str, n_files: usize, events_per_file: u64) -> DatasetSpec {
    let files = (0..n_files)
        .map(|i| DatasetFile {
            path: format!("/store/{name}/f{i:03}.cacf"),
            n_events: events_per_file,
        })
        .collect();
    DatasetSpec::new(name, files).expect("n_files >= 1")
}

/// Writes `n_files` CACF files of NanoAOD-like kinematics (px, py, eta,
/// mass) under `dir`, deterministically from `seed`. Returns their paths.
pub fn generate_files(
    dir: &Path,
    prefix: &str,
    n_files: usize,
    events_per_file: usize,
    seed: u64,
) -> Result<Vec<PathBuf>, DatasetError> {
    std::fs::create_dir_all(dir).map_err(|e| DatasetError::Io(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paths = Vec::with_capacity(n_files);
    for i in 0..n_files {
        let mut px = Vec::with_capacity(events_per_file);
        let mut py = Vec::with_capacity(events_per_file);
        let mut eta = Vec::with_capacity(events_per_file);
        let mut mass = Vec::with_capacity(events_per_file);
        for _ in 0..events_per_file {
            // Falling pt spectrum with uniform azimuth.
            let pt = 5.0 - 25.0 * (1.0 - rng.gen::<f64>()).ln();
            let phi = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            px.push(pt * phi.cos());
            py.push(pt * phi.sin());
            eta.push(rng.gen_range(-4.0..4.0));
            mass.push(rng.gen_range(0.0..120.0));
        }
        let columns: BTreeMap<String, Vec<f64>> = [
            ("px".to_string(), px),
            ("py".to_string(), py),
            ("eta".to_string(), eta),
            ("mass".to_string(), mass),
        ]
        .into();
        let path = dir.join(format!("{prefix}{i:03}.cacf"));
        write_dataset_file(&columns, &path).map_err(|source| DatasetError::File {
            path: path.display().to_string(),
            source,
        })?;
        paths.push(path);
    }
    Ok(paths)
}

/// Maps dataset names to specs. Built from a data root laid out as
/// `<root>/store/<dataset>/*.cacf`; file paths are published as
/// `root://<federation_host>//store/<dataset>/<file>` URLs.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    datasets: BTreeMap<String, DatasetSpec>,
}

impl Catalog {
    pub fn insert(&mut self, spec: DatasetSpec) {
        self.datasets.insert(spec.name.clone(), spec);
    }

    pub fn get(&self, name: &str) -> Result<&DatasetSpec, DatasetError> {
        self.datasets
            .get(name)
            .ok_or_else(|| DatasetError::UnknownDataset(name.to_owned()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.datasets.keys().map(String::as_str)
    }

    pub fn scan(root: &Path, federation_host: &str) -> Result<Self, DatasetError> {
        let io = |e: std::io::Error| DatasetError::Io(e.to_string());
        let store = root.join("store");
        let mut catalog = Catalog::default();
        if !store.exists() {
            return Ok(catalog);
        }
        let mut dirs: Vec<_> = std::fs::read_dir(&store)
            .map_err(io)?
            .filter_map(Result::ok)
            .filter(|e| e.path().is_dir())
            .collect();
        dirs.sort_by_key(|e| e.file_name());
        for dir in dirs {
            let name = dir.file_name().to_string_lossy().into_owned();
            let mut files: Vec<_> = std::fs::read_dir(dir.path())
                .map_err(io)?
                .filter_map(Result::ok)
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "cacf"))
                .collect();
            files.sort();
            if files.is_empty() {
                continue;
            }
            let mut entries = Vec::with_capacity(files.len());
            for path in files {
                let local = path.to_string_lossy().into_owned();
                let header = read_header(&crate::format::LocalFiles, &local).map_err(|source| {
                    DatasetError::File {
                        path: local.clone(),
                        source,
                    }
                })?;
                let file_name = path.file_name().unwrap().to_string_lossy();
                entries.push(DatasetFile {
                    path: format!("root://{federation_host}//store/{name}/{file_name}"),
                    n_events: header.n_events,
                });
            }
            catalog.insert(DatasetSpec::new(name, entries)?);
        }
        Ok(catalog)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(files: &[u64]) -> DatasetSpec {
        DatasetSpec::new(
            "ds",
            files
                .iter()
                .enumerate()
                .map(|(i, &n)| DatasetFile {
                    path: format!("f{i}"),
                    n_events: n,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn remainder_chunk() {
        let lens: Vec<u64> = plan_chunks(&spec(&[12]), 5).unwrap().iter().map(|c| c.len).collect();
        assert_eq!(lens, vec![5, 5, 2]);
    }

    #[test]
    fn benchmark_layout_gives_ninety_chunks() {
        let chunks = plan_chunks(&spec(&[25_000; 18]), 5_000).unwrap();
        assert_eq!(chunks.len(), 18 * 25_000 / 5_000);
        assert!(chunks.iter().all(|c| c.len == 5_000));
    }

    #[test]
    fn zero_chunk_size_and_empty_files() {
        assert_eq!(plan_chunks(&spec(&[10]), 0).unwrap_err(), DatasetError::ZeroChunkSize);
        assert!(DatasetSpec::new("x", vec![]).is_err());
        let hollow = DatasetSpec {
            name: "x".into(),
            files: vec![],
            n_events_total: 0,
        };
        assert!(plan_chunks(&hollow, 5).is_err());
    }

    #[test]
    fn catalog_scans_store_layout() {
        let dir = tempfile::tempdir().unwrap();
        generate_files(&dir.path().join("store/ds1"), "f", 2, 10, 1).unwrap();
        let cat = Catalog::scan(dir.path(), "aaa.example").unwrap();
        let ds = cat.get("ds1").unwrap();
        assert_eq!(ds.n_events_total, 20);
        assert_eq!(ds.files[0].path, "root://aaa.example//store/ds1/f000.cacf");
        assert!(cat.get("nope").is_err());
    }

    proptest! {
        #[test]
        fn chunks_partition_every_file(
            files in proptest::collection::vec(0u64..200, 1..8),
            chunk_size in 1u64..50,
        ) {
            let ds = spec(&files);
            let chunks = plan_chunks(&ds, chunk_size).unwrap();
            prop_assert_eq!(chunks.iter().map(|c| c.len).sum::<u64>(), ds.n_events_total);
            for (i, c) in chunks.iter().enumerate() {
                prop_assert_eq!(c.chunk_id, i as u64);
                prop_assert!(c.len > 0 && c.len <= chunk_size);
            }
            for (fi, f) in ds.files.iter().enumerate() {
                let mine: Vec<_> = chunks.iter().filter(|c| c.file == format!("f{fi}")).collect();
                let mut next = 0;
                for (j, c) in mine.iter().enumerate() {
                    prop_assert_eq!(c.start, next);
                    if j + 1 < mine.len() {
                        prop_assert_eq!(c.len, chunk_size);
                    }
                    next += c.len;
                }
                prop_assert_eq!(next, f.n_events);
            }
        }
    }
}
