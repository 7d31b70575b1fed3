//! Criterion benchmarks for graphbridge kernels live in `benches/`.
