//! Benchmark-only crate; see `benches/ij.rs`.
