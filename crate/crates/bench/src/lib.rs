//! Criterion benchmarks for the captioner live in `benches/`.
