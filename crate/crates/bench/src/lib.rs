//! Criterion benchmarks for casa-core live under `benches/`.
