//! Criterion benchmarks for the hot paths of `reflow-core`; see `benches/`.
