//! Criterion benchmarks for carbonpanel; see `benches/`.
