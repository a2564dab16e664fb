//! Criterion benchmarks for `pageguard`; see `benches/guard.rs`.
