//! Criterion benchmarks for matching and training throughput live under `benches/`.
