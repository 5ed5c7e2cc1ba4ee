//! Benchmark-only crate: see `benches/kernels.rs` for the criterion
//! microbenchmarks and the `downwave bench` subcommand for the end-to-end
//! transform comparison. This library is intentionally empty.
