//! Benchmark-only crate; see `benches/pipeline.rs` (run with `cargo bench`).
