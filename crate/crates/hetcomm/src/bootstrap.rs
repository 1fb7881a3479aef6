//! Rank rendezvous and pre-collective metadata exchange.
//!
//! Before any data-plane communication runs, every rank meets at a named
//! coordinator, receives its endpoint into the fully connected channel
//! fabric, and exchanges device metadata so that all ranks hold an
//! identical picture of the cluster. Bootstrap traffic is host-side
//! control plane only: it is never timed and never appears in the
//! transfer trace.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::topology::ClusterTopology;
use crate::transport::{build_world, Class, Endpoint};
use crate::wire::{put_u64_le, Cursor};

/// Default wall-clock bound on rendezvous and bootstrap waits.
pub const DEFAULT_RENDEZVOUS_TIMEOUT: Duration = Duration::from_secs(30);

const VENDOR_PAD: usize = 64;

// ---------------------------------------------------------------------------
// Coordinator registry
// ---------------------------------------------------------------------------

struct PendingWorld {
    world_size: usize,
    endpoints: Vec<Option<Endpoint>>,
    arrived: usize,
    failed: bool,
}

struct CoordinatorEntry {
    state: Mutex<PendingWorld>,
    cv: Condvar,
}

fn registry() -> &'static Mutex<HashMap<String, Arc<CoordinatorEntry>>> {
    static REGISTRY: OnceLock<Mutex<HashMap<String, Arc<CoordinatorEntry>>>> = OnceLock::new();
    REGISTRY.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Generates a coordinator address that no other world in this process is
/// using. Tests and the harness use this to keep worlds isolated.
pub fn unique_coordinator(prefix: &str) -> String {
    static NEXT: AtomicU64 = AtomicU64::new(0);
    format!("{prefix}-{}", NEXT.fetch_add(1, Ordering::Relaxed))
}

/// Fully connected control/data network for one rank after rendezvous.
pub struct BootstrapNet {
    endpoint: Endpoint,
}

impl BootstrapNet {
    pub fn rank(&self) -> usize {
        self.endpoint.rank()
    }

    pub fn world_size(&self) -> usize {
        self.endpoint.world_size()
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn endpoint_mut(&mut self) -> &mut Endpoint {
        &mut self.endpoint
    }

    /// Consumes the net, handing the endpoint to the communication layer.
    pub fn into_endpoint(self) -> Endpoint {
        self.endpoint
    }
}

/// Meets `world_size` ranks at the named coordinator and returns this
/// rank's endpoint. The first arrival creates the world; arrival order is
/// otherwise irrelevant. If fewer than `world_size` ranks arrive within
/// `timeout`, every rank that did arrive gets `Timeout`.
pub fn rendezvous_with_timeout(
    rank: usize,
    world_size: usize,
    coordinator: &str,
    timeout: Duration,
) -> Result<BootstrapNet> {
    if world_size == 0 {
        return Err(Error::Validation("world_size must be >= 1".into()));
    }
    if rank >= world_size {
        return Err(Error::RankOutOfRange { rank, world_size });
    }

    let entry = {
        let mut reg = registry().lock().unwrap();
        Arc::clone(reg.entry(coordinator.to_string()).or_insert_with(|| {
            let (endpoints, _shared) = build_world(world_size);
            Arc::new(CoordinatorEntry {
                state: Mutex::new(PendingWorld {
                    world_size,
                    endpoints: endpoints.into_iter().map(Some).collect(),
                    arrived: 0,
                    failed: false,
                }),
                cv: Condvar::new(),
            })
        }))
    };

    let mut state = entry.state.lock().unwrap();
    if state.world_size != world_size {
        return Err(Error::Validation(format!(
            "coordinator {coordinator} already hosts a world of size {}, not {world_size}",
            state.world_size
        )));
    }
    let endpoint = state.endpoints[rank].take().ok_or_else(|| {
        Error::Validation(format!(
            "rank {rank} arrived twice at coordinator {coordinator}"
        ))
    })?;
    state.arrived += 1;
    if state.arrived == world_size {
        // Last one in: world is complete, retire the coordinator name.
        registry().lock().unwrap().remove(coordinator);
        entry.cv.notify_all();
    }

    while state.arrived < world_size && !state.failed {
        let (next, wait) = entry.cv.wait_timeout(state, timeout).unwrap();
        state = next;
        if wait.timed_out() && state.arrived < world_size {
            state.failed = true;
            registry().lock().unwrap().remove(coordinator);
            entry.cv.notify_all();
        }
    }
    if state.failed {
        return Err(Error::Timeout(format!(
            "rendezvous at {coordinator}: {}/{world_size} ranks arrived",
            state.arrived
        )));
    }
    Ok(BootstrapNet { endpoint })
}

/// `rendezvous_with_timeout` with the default timeout.
pub fn rendezvous(rank: usize, world_size: usize, coordinator: &str) -> Result<BootstrapNet> {
    rendezvous_with_timeout(rank, world_size, coordinator, DEFAULT_RENDEZVOUS_TIMEOUT)
}

// ---------------------------------------------------------------------------
// Bootstrap allgather
// ---------------------------------------------------------------------------

/// Control-plane allgather: every rank contributes an equal-length
/// payload and receives the rank-ordered list of all contributions,
/// identical everywhere. Implemented as a naive gather-to-root plus
/// broadcast; the control plane is not performance-relevant.
pub fn bootstrap_allgather(net: &mut BootstrapNet, local: &[u8]) -> Result<Vec<Vec<u8>>> {
    let rank = net.rank();
    let world = net.world_size();
    if world == 1 {
        return Ok(vec![local.to_vec()]);
    }
    let ep = net.endpoint_mut();

    if rank == 0 {
        let mut parts: Vec<Vec<u8>> = vec![local.to_vec()];
        let mut bad: Option<(usize, usize)> = None;
        for src in 1..world {
            let payload = ep.recv_msg(src, Class::Boot)?;
            if payload.len() != local.len() && bad.is_none() {
                bad = Some((src, payload.len()));
            }
            parts.push(payload);
        }
        // Frame: status byte, then either the error or the gathered list.
        let mut frame = Vec::new();
        match bad {
            Some((bad_rank, got)) => {
                frame.push(1);
                put_u64_le(&mut frame, bad_rank as u64);
                put_u64_le(&mut frame, got as u64);
                put_u64_le(&mut frame, local.len() as u64);
            }
            None => {
                frame.push(0);
                put_u64_le(&mut frame, local.len() as u64);
                for p in &parts {
                    frame.extend_from_slice(p);
                }
            }
        }
        for dst in 1..world {
            ep.send_msg(dst, Class::Boot, frame.clone())?;
        }
        match bad {
            Some((bad_rank, got)) => Err(Error::LengthMismatch {
                rank: bad_rank,
                got,
                expected: local.len(),
            }),
            None => Ok(parts),
        }
    } else {
        ep.send_msg(0, Class::Boot, local.to_vec())?;
        let frame = ep.recv_msg(0, Class::Boot)?;
        let mut cur = Cursor::new(&frame);
        match cur.u8()? {
            1 => {
                let bad_rank = cur.u64_le()? as usize;
                let got = cur.u64_le()? as usize;
                let expected = cur.u64_le()? as usize;
                Err(Error::LengthMismatch {
                    rank: bad_rank,
                    got,
                    expected,
                })
            }
            0 => {
                let len = cur.u64_le()? as usize;
                let mut parts = Vec::with_capacity(world);
                for _ in 0..world {
                    parts.push(cur.bytes(len)?.to_vec());
                }
                Ok(parts)
            }
            other => Err(Error::Parse(format!("bad allgather status byte {other}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Global directory
// ---------------------------------------------------------------------------

/// One rank's hardware record as exchanged during bootstrap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirEntry {
    pub rank: usize,
    pub node_id: usize,
    pub device_id: usize,
    pub vendor: String,
    pub nic_id: usize,
}

/// Rank-ordered table of every rank's device metadata; byte-identical on
/// all ranks after `build_directory`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalDirectory {
    entries: Vec<DirEntry>,
}

impl GlobalDirectory {
    pub fn entries(&self) -> &[DirEntry] {
        &self.entries
    }

    pub fn entry(&self, rank: usize) -> Result<&DirEntry> {
        self.entries.get(rank).ok_or(Error::RankOutOfRange {
            rank,
            world_size: self.entries.len(),
        })
    }

    pub fn world_size(&self) -> usize {
        self.entries.len()
    }

    pub fn same_vendor(&self, a: usize, b: usize) -> Result<bool> {
        Ok(self.entry(a)?.vendor == self.entry(b)?.vendor)
    }

    /// Canonical serialization used for the cross-rank consensus check.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.rank, e.node_id, e.device_id, e.vendor, e.nic_id
            ));
        }
        out.into_bytes()
    }
}

fn encode_entry(e: &DirEntry) -> Result<Vec<u8>> {
    let vendor = e.vendor.as_bytes();
    if vendor.len() > VENDOR_PAD {
        return Err(Error::Validation(format!(
            "vendor id '{}' exceeds {VENDOR_PAD} bytes",
            e.vendor
        )));
    }
    let mut out = Vec::with_capacity(8 * 4 + 1 + VENDOR_PAD);
    put_u64_le(&mut out, e.rank as u64);
    put_u64_le(&mut out, e.node_id as u64);
    put_u64_le(&mut out, e.device_id as u64);
    put_u64_le(&mut out, e.nic_id as u64);
    out.push(vendor.len() as u8);
    out.extend_from_slice(vendor);
    out.resize(8 * 4 + 1 + VENDOR_PAD, 0);
    Ok(out)
}

fn decode_entry(bytes: &[u8]) -> Result<DirEntry> {
    let mut cur = Cursor::new(bytes);
    let rank = cur.u64_le()? as usize;
    let node_id = cur.u64_le()? as usize;
    let device_id = cur.u64_le()? as usize;
    let nic_id = cur.u64_le()? as usize;
    let vlen = cur.u8()? as usize;
    let vendor = String::from_utf8(cur.bytes(vlen)?.to_vec())
        .map_err(|e| Error::Parse(format!("vendor id not utf-8: {e}")))?;
    Ok(DirEntry {
        rank,
        node_id,
        device_id,
        vendor,
        nic_id,
    })
}

/// Exchanges per-rank device metadata over the bootstrap network and
/// returns the assembled directory. Every rank ends up with identical
/// contents; entry `i` describes rank `i`.
pub fn build_directory(
    net: &mut BootstrapNet,
    topology: &ClusterTopology,
) -> Result<GlobalDirectory> {
    let rank = net.rank();
    if topology.world_size() != net.world_size() {
        return Err(Error::Validation(format!(
            "topology has {} devices but world size is {}",
            topology.world_size(),
            net.world_size()
        )));
    }
    let dev = topology.device_of_rank(rank)?;
    let local = encode_entry(&DirEntry {
        rank,
        node_id: dev.node_id,
        device_id: dev.device_id,
        vendor: dev.vendor.as_str().to_string(),
        nic_id: dev.nic_id,
    })?;
    let gathered = bootstrap_allgather(net, &local)?;
    let mut entries = Vec::with_capacity(gathered.len());
    for (i, bytes) in gathered.iter().enumerate() {
        let e = decode_entry(bytes)?;
        if e.rank != i {
            return Err(Error::Validation(format!(
                "directory slot {i} holds rank {}",
                e.rank
            )));
        }
        entries.push(e);
    }
    Ok(GlobalDirectory { entries })
}
