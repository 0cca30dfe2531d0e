//! Criterion benchmarks for the disc hot paths; see `benches/`.
