//! Criterion benchmarks for `mmckd-core` live under `benches/`.
