//! Criterion benchmarks for the solver kernels; see `benches/kernels.rs`.
