//! Criterion benchmarks for the per-step and per-iteration hot paths. Run
//! with `cargo bench -p gmes-bench`.
