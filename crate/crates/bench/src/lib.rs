//! Criterion benchmarks for the hot paths of `structgen-core`; see `benches/`.
