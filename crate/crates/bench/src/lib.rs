//! Benchmark-only crate; see benches/propagation.rs.
