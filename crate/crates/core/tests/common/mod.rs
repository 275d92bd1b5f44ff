#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use casa_core::dataset::generate_files;
use casa_core::engine::{run_pipeline, Histogram, PipelineSpec};
use casa_core::format::{read_dataset_file, ColumnBatch};

/// Writes `n_files` generated files under `<root>/store/<name>/`.
pub fn seed_dataset(root: &Path, name: &str, n_files: usize, events: usize, seed: u64) {
    generate_files(&root.join("store").join(name), "f", n_files, events, seed).unwrap();
}

/// Runs the pipeline once over every file of the dataset concatenated into
/// one batch.
pub fn single_batch_oracle(root: &Path, name: &str, pipeline: &PipelineSpec) -> Vec<Histogram> {
    let dir = root.join("store").join(name);
    let mut paths: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "cacf"))
        .collect();
    paths.sort();
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in paths {
        for (k, v) in read_dataset_file(&p).unwrap().into_columns() {
            columns.entry(k).or_default().extend(v);
        }
    }
    let batch = ColumnBatch::new(columns).unwrap();
    run_pipeline(&batch, &pipeline.compile().unwrap()).unwrap().histograms
}
