//! Criterion benchmarks for the promptprf retrieval pipeline; see `benches/`.
