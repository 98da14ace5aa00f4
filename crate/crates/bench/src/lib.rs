//! Criterion benchmarks for lcdicd live under `benches/`.
