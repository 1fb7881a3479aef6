//! Multi-rank in-process test harness.
//!
//! Spawns one OS thread per rank, runs rendezvous and the directory
//! exchange, hands each thread its [`SimRank`] adaptor stack, and joins
//! the results. All ranks of a world live in one process.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crate::adaptors::SimRank;
use crate::bootstrap::{build_directory, rendezvous_with_timeout, unique_coordinator};
use crate::error::{Error, Result};
use crate::topology::ClusterTopology;
use crate::transport::TransferRecord;

/// Results of a completed world run plus the global transfer trace.
pub struct WorldRun<T> {
    /// Per-rank return values, indexed by rank.
    pub results: Vec<T>,
    pub trace: Vec<TransferRecord>,
}

/// Options for [`run_world_with`].
pub struct WorldOptions {
    /// Coordinator address; fresh and unique when `None`.
    pub coordinator: Option<String>,
    /// Wall-clock guard for rendezvous and blocking receives.
    pub timeout: Duration,
}

impl Default for WorldOptions {
    fn default() -> Self {
        WorldOptions {
            coordinator: None,
            timeout: Duration::from_secs(30),
        }
    }
}

/// Runs `f` once per rank of the topology's world, each on its own
/// thread, and returns the rank-ordered results with the trace.
pub fn run_world_with<T, F>(
    topology: &Arc<ClusterTopology>,
    opts: WorldOptions,
    f: F,
) -> Result<WorldRun<T>>
where
    T: Send + 'static,
    F: Fn(SimRank) -> Result<T> + Send + Sync + 'static,
{
    let world_size = topology.world_size();
    let coordinator = opts
        .coordinator
        .unwrap_or_else(|| unique_coordinator("world"));
    let f = Arc::new(f);

    let mut handles = Vec::with_capacity(world_size);
    for rank in 0..world_size {
        let topology = Arc::clone(topology);
        let coordinator = coordinator.clone();
        let f = Arc::clone(&f);
        let timeout = opts.timeout;
        handles.push(thread::spawn(move || {
            let mut net = rendezvous_with_timeout(rank, world_size, &coordinator, timeout)?;
            net.endpoint_mut().set_timeout(timeout);
            let directory = build_directory(&mut net, &topology)?;
            let sim = SimRank::new(net.into_endpoint(), topology, directory)?;
            let shared = Arc::clone(sim.endpoint().shared());
            f(sim).map(|out| (out, shared))
        }));
    }

    let mut results = Vec::with_capacity(world_size);
    let mut shared = None;
    let mut first_err: Option<Error> = None;
    for h in handles {
        match h.join().expect("rank thread panicked") {
            Ok((out, sh)) => {
                shared.get_or_insert(sh);
                results.push(out);
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let trace = shared.map(|s| s.trace()).unwrap_or_default();
    Ok(WorldRun { results, trace })
}

/// `run_world_with` using default options, returning only the results.
pub fn run_world<T, F>(topology: &Arc<ClusterTopology>, f: F) -> Result<Vec<T>>
where
    T: Send + 'static,
    F: Fn(SimRank) -> Result<T> + Send + Sync + 'static,
{
    run_world_with(topology, WorldOptions::default(), f).map(|r| r.results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology;

    #[test]
    fn world_results_are_rank_ordered() {
        let topo = Arc::new(topology::two_node(2));
        let results = run_world(&topo, |r| Ok((r.rank(), r.vendor_name()))).unwrap();
        assert_eq!(results.len(), 4);
        for (rank, (got, vendor)) in results.iter().enumerate() {
            assert_eq!(*got, rank);
            let expect = if rank < 2 { "nvidia" } else { "amd" };
            assert_eq!(vendor, expect);
        }
    }

    #[test]
    fn rank_error_propagates() {
        let topo = Arc::new(topology::single_node("nvidia", 2).unwrap());
        let err = run_world::<(), _>(&topo, |r| {
            if r.rank() == 1 {
                Err(Error::Validation("boom".into()))
            } else {
                Ok(())
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
