//! Shared fixtures for the criterion benches.

use packsim_core::config::Config;
use packsim_core::trace::{generate_prefix_trace, generate_skewed_trace, WorkloadTrace};

pub fn bench_config() -> Config {
    Config {
        tile: 128,
        capacity: 8192,
        headroom: 32,
        ..Config::default()
    }
}

/// Skewed length-only batch, the shape interactive serving produces.
pub fn skewed_batch(n: usize) -> WorkloadTrace {
    generate_skewed_trace(n, 7, 0.6, 128, 4096).expect("valid generator parameters")
}

/// Token-form batch with heavy prefix sharing.
pub fn prefix_batch(n: usize) -> WorkloadTrace {
    generate_prefix_trace(n, 7, 4, 256, 128).expect("valid generator parameters")
}
