//! Crate-wide error type.
//!
//! One enum covers every failure mode in the library so errors propagate
//! freely between the topology, transport, adaptor, and orchestration
//! layers without conversion boilerplate.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration document could not be parsed at all.
    #[error("parse error: {0}")]
    Parse(String),

    /// A document parsed but violates a structural invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A rank outside `[0, world_size)` was referenced.
    #[error("rank {rank} out of range for world size {world_size}")]
    RankOutOfRange { rank: usize, world_size: usize },

    /// A per-rank memory cap would be exceeded by an allocation.
    #[error("allocation of {requested} bytes exceeds remaining cap of {remaining} bytes on rank {rank}")]
    Alloc {
        rank: usize,
        requested: usize,
        remaining: usize,
    },

    /// Device copies never cross ranks.
    #[error("cross-rank copy: src owned by rank {src}, dst by rank {dst}")]
    CrossRankCopy { src: usize, dst: usize },

    /// A buffer in the wrong memory space was passed to the NIC layer.
    #[error("wrong space: expected {expected}, got {got}")]
    WrongSpace {
        expected: &'static str,
        got: &'static str,
    },

    /// Operation posted on a closed queue pair.
    #[error("queue pair to rank {remote} is closed")]
    QpClosed { remote: usize },

    /// Matched send/recv (or posted/delivered) sizes differ.
    #[error("size mismatch: sender has {send} bytes, receiver expects {recv}")]
    SizeMismatch { send: usize, recv: usize },

    /// The CCL adaptor refuses groups or pairs spanning vendors.
    #[error("mixed-vendor group: {0}")]
    MixedVendorGroup(String),

    /// Rendezvous or a blocking wait did not complete in time.
    #[error("timeout: {0}")]
    Timeout(String),

    /// Bootstrap allgather called with unequal payload lengths.
    #[error("length mismatch: rank {rank} contributed {got} bytes, expected {expected}")]
    LengthMismatch {
        rank: usize,
        got: usize,
        expected: usize,
    },

    /// Sender and receiver disagree on the transfer path.
    #[error("path mismatch: sender tagged {send}, receiver posted {recv}")]
    PathMismatch { send: String, recv: String },

    /// Point-to-point transfer addressed to the sending rank itself.
    #[error("self send: rank {0} addressed itself")]
    SelfSend(usize),

    /// The in-process channel to a rank has shut down.
    #[error("channel closed: {0}")]
    ChannelClosed(String),

    /// tp*pp*dp does not match the world size.
    #[error("grid mismatch: tp {tp} * pp {pp} * dp {dp} != world size {world_size}")]
    GridMismatch {
        tp: usize,
        pp: usize,
        dp: usize,
        world_size: usize,
    },

    /// A TP or DP group spans vendors, which only PP groups may do.
    #[error("heterogeneity not supported: {0}")]
    HeterogeneityNotSupported(String),

    /// Collective payload shapes violate the operation's partition rules.
    #[error("shape error: {0}")]
    Shape(String),

    /// Broadcast root is not a member of the group.
    #[error("root rank {root} not in group")]
    RootNotInGroup { root: usize },

    /// Collective invoked on an empty group.
    #[error("empty group")]
    EmptyGroup,

    /// A partition plan does not fit the stage profile.
    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    /// No feasible partition exists (fewer layers than stages).
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Training loss became non-finite.
    #[error("training diverged at iteration {iter} (loss {loss})")]
    Diverged { iter: usize, loss: f64 },

    /// An experiment spec references something that does not resolve.
    #[error("spec error: {0}")]
    Spec(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
