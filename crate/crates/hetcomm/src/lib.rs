//! hetcomm — a communication library and simulated-cluster harness for
//! heterogeneous (multi-vendor) GPU training.
//!
//! The library models a cluster of nodes whose devices come from
//! different vendors and provides:
//!
//! * vendor adaptors (device, network plugin, CCL) behind narrow traits,
//!   with a simulated implementation that moves real bytes between
//!   in-process rank threads while tracking simulated time;
//! * two heterogeneous point-to-point paths — a CPU-forwarding baseline
//!   that stages through host memory and a device-direct chunked pipeline
//!   that keeps the data plane on the device;
//! * heterogeneous collectives composed from per-vendor collectives plus
//!   cross-vendor leader exchange;
//! * a TP/DP/PP group builder with differentiated backend selection
//!   (only pipeline groups may span vendors);
//! * a 1F1B pipeline simulator and an uneven layer-partition optimizer;
//! * a deterministic toy trainer that pushes activations and gradients
//!   through the library and reproduces a single-process reference
//!   bitwise.
//!
//! Every capability has a runnable example under `examples/`; the
//! `hetcomm` binary wraps the same entry points as subcommands.

pub mod adaptors;
pub mod bootstrap;
pub mod collectives;
pub mod error;
pub mod experiments;
pub mod groups;
pub mod harness;
pub mod p2p;
pub mod pipeline;
pub mod topology;
pub mod trainer;
pub mod transport;
mod wire;

pub use error::{Error, Result};
pub use wire::{bytes_to_f64s, f64s_to_bytes};

/// Environment variable overriding the default seed (42).
pub const ENV_SEED: &str = "HETCOMM_SEED";
/// Environment variable for the default coordinator address.
pub const ENV_COORD: &str = "HETCOMM_COORD";
/// Default seed for everything randomized.
pub const DEFAULT_SEED: u64 = 42;

/// Seed from `HETCOMM_SEED`, falling back to the default.
pub fn seed_from_env() -> u64 {
    std::env::var(ENV_SEED)
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_SEED)
}
