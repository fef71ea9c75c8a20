//! Criterion benchmarks for toa-core live under `benches/`.
