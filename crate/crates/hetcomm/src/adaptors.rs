//! Vendor adaptor interfaces and the simulated implementation.
//!
//! Three interfaces hide all hardware behavior from the rest of the
//! library: [`DeviceAdaptor`] (memory allocation, copies, events),
//! [`NetAdaptor`] (memory-region registration and queue pairs), and
//! [`CclAdaptor`] (vendor collectives and homogeneous P2P). [`SimRank`]
//! implements all three against the channel fabric, parameterized by the
//! rank's device descriptor, so the two built-in vendors behave
//! differently only through their calibrated numbers.
//!
//! The CCL adaptor refuses any group or pair that spans vendors; bridging
//! vendors is the job of the heterogeneous P2P layer.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use crate::bootstrap::GlobalDirectory;
use crate::error::{Error, Result};
use crate::topology::{ClusterTopology, DeviceDescriptor, LinkKind, LinkSpec, VendorId};
use crate::transport::{
    wire_time_us, Class, Endpoint, NicDir, NicKey, RecordPath, Segment, SegmentKind,
    TransferRecord,
};
use crate::wire::{put_f64_le, put_u64_le, Cursor};

// ---------------------------------------------------------------------------
// Buffers, events, handles
// ---------------------------------------------------------------------------

/// Memory space a buffer lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    /// Ordinary device memory (user buffers).
    Device,
    /// Host memory (CPU-forwarding staging).
    Host,
    /// Device-side chunk buffer, registrable with the NIC.
    Chunk,
}

impl Space {
    pub fn name(self) -> &'static str {
        match self {
            Space::Device => "device",
            Space::Host => "host",
            Space::Chunk => "chunk",
        }
    }
}

/// A simulated buffer: real bytes plus ownership and space metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceBuffer {
    owner_rank: usize,
    space: Space,
    data: Vec<u8>,
}

impl DeviceBuffer {
    pub fn owner_rank(&self) -> usize {
        self.owner_rank
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn bytes_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }
}

/// Handle onto a completion event owned by the rank's adaptor stack.
/// State is pending until the adaptor drives it to completion; completed
/// events never go back to pending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CompletionEvent {
    id: u64,
}

impl CompletionEvent {
    pub fn id(&self) -> u64 {
        self.id
    }
}

/// Registered memory region handle; the registered buffer is owned by the
/// net adaptor until deregistration, which keeps the handle valid exactly
/// as long as the buffer lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MrHandle {
    key: u64,
}

impl MrHandle {
    pub fn key(&self) -> u64 {
        self.key
    }
}

/// Queue pair handle; one QP per remote rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QpHandle {
    remote: usize,
}

impl QpHandle {
    pub fn remote(&self) -> usize {
        self.remote
    }
}

/// Collective operations the CCL adaptor supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CclOp {
    AllreduceSum,
    Allgather,
    ReducescatterSum,
    Broadcast { root: usize },
}

/// Element type for reductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    I64,
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::I64 | Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }

    /// `acc += rhs` elementwise over raw little-endian buffers.
    pub fn sum_into(self, acc: &mut [u8], rhs: &[u8]) -> Result<()> {
        if acc.len() != rhs.len() || acc.len() % self.width() != 0 {
            return Err(Error::Shape(format!(
                "reduction buffers must be equal multiples of {} bytes, got {} and {}",
                self.width(),
                acc.len(),
                rhs.len()
            )));
        }
        match self {
            Dtype::I64 => {
                for (a, b) in acc.chunks_exact_mut(8).zip(rhs.chunks_exact(8)) {
                    let v = i64::from_le_bytes(a.try_into().unwrap())
                        .wrapping_add(i64::from_le_bytes(b.try_into().unwrap()));
                    a.copy_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F32 => {
                for (a, b) in acc.chunks_exact_mut(4).zip(rhs.chunks_exact(4)) {
                    let v = f32::from_le_bytes(a.try_into().unwrap())
                        + f32::from_le_bytes(b.try_into().unwrap());
                    a.copy_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F64 => {
                for (a, b) in acc.chunks_exact_mut(8).zip(rhs.chunks_exact(8)) {
                    let v = f64::from_le_bytes(a.try_into().unwrap())
                        + f64::from_le_bytes(b.try_into().unwrap());
                    a.copy_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adaptor interfaces
// ---------------------------------------------------------------------------

/// Hardware abstraction: memory allocation, copies, event management.
pub trait DeviceAdaptor {
    fn vendor(&self) -> &VendorId;

    /// Zero-initialized buffer in the requested space; fails with
    /// `Alloc` when a configured per-rank memory cap would be exceeded.
    fn alloc(&mut self, size_bytes: usize, space: Space) -> Result<DeviceBuffer>;

    /// Returns a buffer's bytes to the allocator.
    fn free(&mut self, buf: DeviceBuffer);

    /// Copies `len` bytes between two buffers owned by this rank and
    /// returns the completion event plus the simulated duration in µs.
    /// Device-side copies run at the device's memory bandwidth; any copy
    /// touching host space runs at the host-bridge bandwidth.
    fn copy_range(
        &mut self,
        src: &DeviceBuffer,
        src_off: usize,
        dst: &mut DeviceBuffer,
        dst_off: usize,
        len: usize,
    ) -> Result<(CompletionEvent, f64)>;

    /// Prefix copy, `copy_range` from offset 0 to offset 0.
    fn copy(
        &mut self,
        src: &DeviceBuffer,
        dst: &mut DeviceBuffer,
        size_bytes: usize,
    ) -> Result<(CompletionEvent, f64)> {
        self.copy_range(src, 0, dst, 0, size_bytes)
    }

    fn event_complete(&self, ev: CompletionEvent) -> bool;
}

/// Network adaptation: MR registration and queue-pair send/recv.
pub trait NetAdaptor {
    /// Registers a chunk-space buffer, taking ownership; any other space
    /// is `WrongSpace`. Keys are unique per rank.
    fn register(&mut self, buf: DeviceBuffer) -> Result<MrHandle>;

    /// Releases the registration and returns the buffer.
    fn deregister(&mut self, mr: MrHandle) -> Result<DeviceBuffer>;

    fn mr_bytes(&self, mr: MrHandle) -> Result<&[u8]>;

    /// Control-plane write into a registered region (headers, metadata);
    /// carries no simulated cost.
    fn mr_write(&mut self, mr: MrHandle, offset: usize, bytes: &[u8]) -> Result<()>;

    /// Data-plane copy between a user buffer and a registered region at
    /// the device's memory bandwidth. Returns the simulated duration.
    fn copy_to_mr(
        &mut self,
        src: &DeviceBuffer,
        src_off: usize,
        mr: MrHandle,
        mr_off: usize,
        len: usize,
    ) -> Result<f64>;

    fn copy_from_mr(
        &mut self,
        mr: MrHandle,
        mr_off: usize,
        dst: &mut DeviceBuffer,
        dst_off: usize,
        len: usize,
    ) -> Result<f64>;

    /// One queue pair per remote rank; repeated calls return the same QP.
    fn create_qp(&mut self, remote: usize) -> Result<QpHandle>;

    fn close_qp(&mut self, qp: QpHandle);

    /// Posts `size` bytes from the region; completes when matched with a
    /// posted recv on the remote side and the simulated wire time elapses.
    fn post_send(&mut self, qp: QpHandle, mr: MrHandle, size: usize) -> Result<CompletionEvent>;

    /// Posts a receive of exactly `size` bytes into the region.
    fn post_recv(&mut self, qp: QpHandle, mr: MrHandle, size: usize) -> Result<CompletionEvent>;

    /// Drives the QP protocol until `ev` completes, in posted order; on
    /// success returns the simulated wire duration in µs. A recv with no
    /// matching send surfaces `Timeout` and the event stays pending.
    fn qp_wait(&mut self, ev: CompletionEvent) -> Result<f64>;
}

/// Collective adaptation: vendor collectives over vendor-homogeneous
/// groups, plus native homogeneous P2P.
pub trait CclAdaptor {
    /// Runs `op` over the (vendor-homogeneous) member ranks; every member
    /// must call. Returns the local result and the simulated duration of
    /// the collective under the ring cost model.
    fn ccl_collective(
        &mut self,
        members: &[usize],
        op: CclOp,
        input: &DeviceBuffer,
        dtype: Dtype,
    ) -> Result<(DeviceBuffer, f64)>;

    /// Native same-vendor P2P send; byte-identical delivery.
    fn ccl_send(&mut self, dst: usize, payload: &DeviceBuffer) -> Result<TransferRecord>;

    /// Matching receive of `size` bytes from `src`.
    fn ccl_recv(&mut self, src: usize, size: usize) -> Result<(DeviceBuffer, TransferRecord)>;
}

// ---------------------------------------------------------------------------
// Simulated implementation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum EventKind {
    /// Completed inline (copies).
    Inline,
    QpSend { remote: usize },
    QpRecv { remote: usize },
}

#[derive(Debug)]
struct EventState {
    kind: EventKind,
    complete: bool,
    dur_us: f64,
}

#[derive(Debug)]
struct Post {
    mr: u64,
    size: usize,
    event: u64,
}

#[derive(Debug, Default)]
struct QpState {
    closed: bool,
    sends: VecDeque<Post>,
    recvs: VecDeque<Post>,
}

/// Per-rank simulated adaptor stack: one instance per rank context,
/// constructed for that rank's vendor. All cross-rank interaction flows
/// through the transport fabric; all state here is rank-local.
pub struct SimRank {
    ep: Endpoint,
    topology: Arc<ClusterTopology>,
    directory: GlobalDirectory,
    desc: DeviceDescriptor,
    mem_cap: Option<usize>,
    allocated: usize,
    next_event: u64,
    events: HashMap<u64, EventState>,
    next_mr_key: u64,
    mrs: HashMap<u64, DeviceBuffer>,
    qps: HashMap<usize, QpState>,
}

impl SimRank {
    pub fn new(
        ep: Endpoint,
        topology: Arc<ClusterTopology>,
        directory: GlobalDirectory,
    ) -> Result<Self> {
        let desc = topology.device_of_rank(ep.rank())?.clone();
        Ok(SimRank {
            ep,
            topology,
            directory,
            desc,
            mem_cap: None,
            allocated: 0,
            next_event: 0,
            events: HashMap::new(),
            next_mr_key: 0,
            mrs: HashMap::new(),
            qps: HashMap::new(),
        })
    }

    pub fn rank(&self) -> usize {
        self.ep.rank()
    }

    pub fn world_size(&self) -> usize {
        self.ep.world_size()
    }

    pub fn descriptor(&self) -> &DeviceDescriptor {
        &self.desc
    }

    pub fn topology(&self) -> &Arc<ClusterTopology> {
        &self.topology
    }

    pub fn directory(&self) -> &GlobalDirectory {
        &self.directory
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.ep
    }

    pub fn endpoint_mut(&mut self) -> &mut Endpoint {
        &mut self.ep
    }

    pub fn clock_us(&self) -> f64 {
        self.ep.clock.now_us()
    }

    /// Configures the per-rank memory cap (default unlimited).
    pub fn set_mem_cap(&mut self, cap: Option<usize>) {
        self.mem_cap = cap;
    }

    fn new_event(&mut self, kind: EventKind, complete: bool, dur_us: f64) -> CompletionEvent {
        let id = self.next_event;
        self.next_event += 1;
        self.events.insert(
            id,
            EventState {
                kind,
                complete,
                dur_us,
            },
        );
        CompletionEvent { id }
    }

    fn complete_event(&mut self, id: u64, dur_us: f64) {
        let ev = self.events.get_mut(&id).expect("event exists");
        ev.complete = true;
        ev.dur_us = dur_us;
    }

    /// Copy bandwidth in bytes per µs for a src/dst space pair.
    fn copy_bw(&self, a: Space, b: Space) -> f64 {
        let host_involved = a == Space::Host || b == Space::Host;
        let bw = if host_involved {
            self.desc.host_bw_gbps
        } else {
            self.desc.mem_bw_gbps
        };
        bw * 1e3
    }

    /// Vendor name of this rank's device.
    pub fn vendor_name(&self) -> String {
        self.desc.vendor.as_str().to_string()
    }

    /// The NIC link between two ranks' nodes: bottleneck bandwidth and the
    /// larger latency of the two endpoint specs.
    pub fn nic_link_between(&self, a: usize, b: usize) -> Result<LinkSpec> {
        let na = self.directory.entry(a)?.node_id;
        let nb = self.directory.entry(b)?.node_id;
        let la = *self.topology.link(na, LinkKind::NicNetwork)?;
        let lb = *self.topology.link(nb, LinkKind::NicNetwork)?;
        LinkSpec::new(
            LinkKind::NicNetwork,
            la.bandwidth_gbps.min(lb.bandwidth_gbps),
            la.latency_us.max(lb.latency_us),
        )
    }

    fn raw_copy(
        &mut self,
        src: &DeviceBuffer,
        src_off: usize,
        dst: &mut DeviceBuffer,
        dst_off: usize,
        len: usize,
    ) -> Result<f64> {
        if src.owner_rank != self.rank() || dst.owner_rank != self.rank() {
            return Err(Error::CrossRankCopy {
                src: src.owner_rank,
                dst: dst.owner_rank,
            });
        }
        if src_off + len > src.len() || dst_off + len > dst.len() {
            return Err(Error::Validation(format!(
                "copy of {len} bytes out of bounds (src {} dst {})",
                src.len(),
                dst.len()
            )));
        }
        dst.data[dst_off..dst_off + len].copy_from_slice(&src.data[src_off..src_off + len]);
        Ok(len as f64 / self.copy_bw(src.space, dst.space))
    }

    fn qp_state(&mut self, remote: usize) -> Result<&mut QpState> {
        self.qps
            .get_mut(&remote)
            .ok_or_else(|| Error::Validation(format!("no queue pair to rank {remote}")))
    }

    /// Processes the oldest pending send on the QP to `remote`.
    fn progress_send(&mut self, remote: usize) -> Result<()> {
        let head = {
            let qp = self.qp_state(remote)?;
            qp.sends
                .front()
                .map(|p| (p.mr, p.size, p.event))
                .expect("progress_send with pending send")
        };
        let (mr, size, event) = head;
        let bytes = self.mr_bytes(MrHandle { key: mr })?[..size].to_vec();
        self.ep.send_msg(remote, Class::QpData, bytes)?;
        let ack = self.ep.recv_msg(remote, Class::QpAck)?;
        let mut cur = Cursor::new(&ack);
        let status = cur.u8()?;
        self.qp_state(remote)?.sends.pop_front();
        if status != 0 {
            let expected = cur.u64_le()? as usize;
            return Err(Error::SizeMismatch {
                send: size,
                recv: expected,
            });
        }
        let link = self.nic_link_between(self.rank(), remote)?;
        self.complete_event(event, wire_time_us(&link, size as u64));
        Ok(())
    }

    /// Processes the oldest pending recv on the QP to `remote`. On a
    /// harness timeout the post stays queued and the event stays pending.
    fn progress_recv(&mut self, remote: usize) -> Result<()> {
        let head = {
            let qp = self.qp_state(remote)?;
            qp.recvs
                .front()
                .map(|p| (p.mr, p.size, p.event))
                .expect("progress_recv with pending recv")
        };
        let (mr, size, event) = head;
        let bytes = self.ep.recv_msg(remote, Class::QpData)?;
        if bytes.len() != size {
            let mut nak = vec![1u8];
            put_u64_le(&mut nak, size as u64);
            self.ep.send_msg(remote, Class::QpAck, nak)?;
            self.qp_state(remote)?.recvs.pop_front();
            return Err(Error::SizeMismatch {
                send: bytes.len(),
                recv: size,
            });
        }
        self.mr_write(MrHandle { key: mr }, 0, &bytes)?;
        self.ep.send_msg(remote, Class::QpAck, vec![0u8])?;
        self.qp_state(remote)?.recvs.pop_front();
        let link = self.nic_link_between(self.rank(), remote)?;
        self.complete_event(event, wire_time_us(&link, size as u64));
        Ok(())
    }
}

impl DeviceAdaptor for SimRank {
    fn vendor(&self) -> &VendorId {
        &self.desc.vendor
    }

    fn alloc(&mut self, size_bytes: usize, space: Space) -> Result<DeviceBuffer> {
        if let Some(cap) = self.mem_cap {
            let remaining = cap.saturating_sub(self.allocated);
            if size_bytes > remaining {
                return Err(Error::Alloc {
                    rank: self.rank(),
                    requested: size_bytes,
                    remaining,
                });
            }
        }
        self.allocated += size_bytes;
        Ok(DeviceBuffer {
            owner_rank: self.rank(),
            space,
            data: vec![0; size_bytes],
        })
    }

    fn free(&mut self, buf: DeviceBuffer) {
        self.allocated = self.allocated.saturating_sub(buf.len());
    }

    fn copy_range(
        &mut self,
        src: &DeviceBuffer,
        src_off: usize,
        dst: &mut DeviceBuffer,
        dst_off: usize,
        len: usize,
    ) -> Result<(CompletionEvent, f64)> {
        let dur = self.raw_copy(src, src_off, dst, dst_off, len)?;
        let ev = self.new_event(EventKind::Inline, true, dur);
        Ok((ev, dur))
    }

    fn event_complete(&self, ev: CompletionEvent) -> bool {
        self.events.get(&ev.id).map_or(false, |e| e.complete)
    }
}

impl NetAdaptor for SimRank {
    fn register(&mut self, buf: DeviceBuffer) -> Result<MrHandle> {
        if buf.space != Space::Chunk {
            return Err(Error::WrongSpace {
                expected: Space::Chunk.name(),
                got: buf.space.name(),
            });
        }
        let key = self.next_mr_key;
        self.next_mr_key += 1;
        self.mrs.insert(key, buf);
        Ok(MrHandle { key })
    }

    fn deregister(&mut self, mr: MrHandle) -> Result<DeviceBuffer> {
        self.mrs
            .remove(&mr.key)
            .ok_or_else(|| Error::Validation(format!("unknown MR key {}", mr.key)))
    }

    fn mr_bytes(&self, mr: MrHandle) -> Result<&[u8]> {
        self.mrs
            .get(&mr.key)
            .map(|b| b.bytes())
            .ok_or_else(|| Error::Validation(format!("unknown MR key {}", mr.key)))
    }

    fn mr_write(&mut self, mr: MrHandle, offset: usize, bytes: &[u8]) -> Result<()> {
        let buf = self
            .mrs
            .get_mut(&mr.key)
            .ok_or_else(|| Error::Validation(format!("unknown MR key {}", mr.key)))?;
        if offset + bytes.len() > buf.len() {
            return Err(Error::Validation(format!(
                "MR write of {} bytes at {offset} out of bounds ({})",
                bytes.len(),
                buf.len()
            )));
        }
        buf.data[offset..offset + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    fn copy_to_mr(
        &mut self,
        src: &DeviceBuffer,
        src_off: usize,
        mr: MrHandle,
        mr_off: usize,
        len: usize,
    ) -> Result<f64> {
        let mut region = self.deregister(mr)?;
        let res = self.raw_copy(src, src_off, &mut region, mr_off, len);
        self.mrs.insert(mr.key, region);
        res
    }

    fn copy_from_mr(
        &mut self,
        mr: MrHandle,
        mr_off: usize,
        dst: &mut DeviceBuffer,
        dst_off: usize,
        len: usize,
    ) -> Result<f64> {
        let region = self.deregister(mr)?;
        let res = self.raw_copy(&region, mr_off, dst, dst_off, len);
        self.mrs.insert(mr.key, region);
        res
    }

    fn create_qp(&mut self, remote: usize) -> Result<QpHandle> {
        if remote >= self.world_size() {
            return Err(Error::RankOutOfRange {
                rank: remote,
                world_size: self.world_size(),
            });
        }
        let qp = self.qps.entry(remote).or_default();
        if qp.closed {
            return Err(Error::QpClosed { remote });
        }
        Ok(QpHandle { remote })
    }

    fn close_qp(&mut self, qp: QpHandle) {
        self.qps.entry(qp.remote).or_default().closed = true;
    }

    fn post_send(&mut self, qp: QpHandle, mr: MrHandle, size: usize) -> Result<CompletionEvent> {
        if self.mr_bytes(mr)?.len() < size {
            return Err(Error::SizeMismatch {
                send: size,
                recv: self.mr_bytes(mr)?.len(),
            });
        }
        let state = self.qp_state(qp.remote)?;
        if state.closed {
            return Err(Error::QpClosed { remote: qp.remote });
        }
        let ev = self.new_event(EventKind::QpSend { remote: qp.remote }, false, 0.0);
        self.qp_state(qp.remote)?.sends.push_back(Post {
            mr: mr.key,
            size,
            event: ev.id,
        });
        Ok(ev)
    }

    fn post_recv(&mut self, qp: QpHandle, mr: MrHandle, size: usize) -> Result<CompletionEvent> {
        if self.mr_bytes(mr)?.len() < size {
            return Err(Error::SizeMismatch {
                send: size,
                recv: self.mr_bytes(mr)?.len(),
            });
        }
        let state = self.qp_state(qp.remote)?;
        if state.closed {
            return Err(Error::QpClosed { remote: qp.remote });
        }
        let ev = self.new_event(EventKind::QpRecv { remote: qp.remote }, false, 0.0);
        self.qp_state(qp.remote)?.recvs.push_back(Post {
            mr: mr.key,
            size,
            event: ev.id,
        });
        Ok(ev)
    }

    fn qp_wait(&mut self, ev: CompletionEvent) -> Result<f64> {
        loop {
            let (complete, dur, kind) = {
                let state = self
                    .events
                    .get(&ev.id)
                    .ok_or_else(|| Error::Validation(format!("unknown event {}", ev.id)))?;
                (state.complete, state.dur_us, state.kind)
            };
            if complete {
                return Ok(dur);
            }
            // Drive the queue this event belongs to, oldest first, so
            // completions happen in posted order.
            match kind {
                EventKind::Inline => unreachable!("inline events complete at creation"),
                EventKind::QpSend { remote } => self.progress_send(remote)?,
                EventKind::QpRecv { remote } => self.progress_recv(remote)?,
            }
        }
    }
}

const CCL_OK: u8 = 0;
const CCL_ERR_SIZE: u8 = 1;
const CCL_ERR_SHAPE: u8 = 2;

/// Ring-algorithm cost of a collective on `k` ranks moving `total` bytes
/// over `link`: allreduce pays two passes over the ring, the single-pass
/// collectives one.
pub fn ring_collective_cost_us(op: CclOp, k: usize, total_bytes: u64, link: &LinkSpec) -> f64 {
    if k <= 1 {
        return 0.0;
    }
    let k_f = k as f64;
    let passes = match op {
        CclOp::AllreduceSum => 2.0,
        CclOp::Allgather | CclOp::ReducescatterSum | CclOp::Broadcast { .. } => 1.0,
    };
    passes * (k_f - 1.0) / k_f * total_bytes as f64 / (link.bandwidth_gbps * 1e3)
        + (k_f - 1.0) * link.latency_us
}

impl SimRank {
    /// Sorted, deduplicated members with vendor and membership checks
    /// shared by the CCL entry points.
    fn ccl_group(&self, members: &[usize]) -> Result<Vec<usize>> {
        if members.is_empty() {
            return Err(Error::EmptyGroup);
        }
        let mut sorted = members.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if !sorted.contains(&self.rank()) {
            return Err(Error::Validation(format!(
                "rank {} called a collective on a group it is not part of",
                self.rank()
            )));
        }
        let my_vendor = &self.directory.entry(self.rank())?.vendor;
        for &m in &sorted {
            let v = &self.directory.entry(m)?.vendor;
            if v != my_vendor {
                return Err(Error::MixedVendorGroup(format!(
                    "rank {} is {v}, rank {} is {my_vendor}; use the heterogeneous layer",
                    m,
                    self.rank()
                )));
            }
        }
        Ok(sorted)
    }

    /// Link the collective rides on: the node fabric when the group sits
    /// on one node, otherwise the bottleneck NIC link.
    fn ccl_link(&self, members: &[usize]) -> Result<LinkSpec> {
        let first_node = self.directory.entry(members[0])?.node_id;
        if members
            .iter()
            .all(|&m| self.directory.entry(m).map_or(false, |e| e.node_id == first_node))
        {
            Ok(*self.topology.link(first_node, LinkKind::IntraNodeFabric)?)
        } else {
            let mut link = self.nic_link_between(members[0], members[members.len() - 1])?;
            for w in members.windows(2) {
                let l = self.nic_link_between(w[0], w[1])?;
                link = LinkSpec::new(
                    LinkKind::NicNetwork,
                    link.bandwidth_gbps.min(l.bandwidth_gbps),
                    link.latency_us.max(l.latency_us),
                )?;
            }
            Ok(link)
        }
    }

    /// Leader-side computation of the collective result for each member,
    /// in ascending-rank order. Inputs arrive sorted by member rank.
    fn combine(
        members: &[usize],
        op: CclOp,
        dtype: Dtype,
        inputs: &[Vec<u8>],
    ) -> Result<Vec<Vec<u8>>> {
        let k = members.len();
        let n = inputs[0].len();
        match op {
            CclOp::AllreduceSum => {
                if n % dtype.width() != 0 {
                    return Err(Error::Shape(format!(
                        "payload of {n} bytes is not a multiple of {}",
                        dtype.width()
                    )));
                }
                let mut acc = inputs[0].clone();
                for rhs in &inputs[1..] {
                    dtype.sum_into(&mut acc, rhs)?;
                }
                Ok(vec![acc; k])
            }
            CclOp::Allgather => {
                let mut cat = Vec::with_capacity(n * k);
                for i in inputs {
                    cat.extend_from_slice(i);
                }
                Ok(vec![cat; k])
            }
            CclOp::ReducescatterSum => {
                if k > 0 && (n % k != 0 || (n / k) % dtype.width() != 0) {
                    return Err(Error::Shape(format!(
                        "reduce-scatter input of {n} bytes does not split into {k} aligned shards"
                    )));
                }
                let mut acc = inputs[0].clone();
                for rhs in &inputs[1..] {
                    dtype.sum_into(&mut acc, rhs)?;
                }
                let shard = n / k;
                Ok((0..k)
                    .map(|i| acc[i * shard..(i + 1) * shard].to_vec())
                    .collect())
            }
            CclOp::Broadcast { root } => {
                let pos = members
                    .iter()
                    .position(|&m| m == root)
                    .ok_or(Error::RootNotInGroup { root })?;
                Ok(vec![inputs[pos].clone(); k])
            }
        }
    }
}

impl CclAdaptor for SimRank {
    fn ccl_collective(
        &mut self,
        members: &[usize],
        op: CclOp,
        input: &DeviceBuffer,
        dtype: Dtype,
    ) -> Result<(DeviceBuffer, f64)> {
        let members = self.ccl_group(members)?;
        if let CclOp::Broadcast { root } = op {
            if !members.contains(&root) {
                return Err(Error::RootNotInGroup { root });
            }
        }
        let me = self.rank();
        let leader = members[0];
        let k = members.len();

        if k == 1 {
            // Degenerate group: every collective is the identity (a
            // 1-rank reduce-scatter keeps the whole vector).
            let mut out = self.alloc(input.len(), Space::Device)?;
            out.bytes_mut().copy_from_slice(input.bytes());
            return Ok((out, 0.0));
        }

        if me == leader {
            let mut inputs = vec![input.bytes().to_vec()];
            let mut clocks = vec![self.ep.clock.now_us()];
            for &m in &members[1..] {
                let msg = self.ep.recv_msg(m, Class::Coll)?;
                let mut cur = Cursor::new(&msg);
                clocks.push(cur.f64_le()?);
                let n = cur.remaining();
                inputs.push(cur.bytes(n)?.to_vec());
            }
            // Equal payload sizes are a precondition of every op here.
            let status = if inputs.iter().any(|i| i.len() != inputs[0].len()) {
                CCL_ERR_SIZE
            } else {
                CCL_OK
            };
            let results = if status == CCL_OK {
                match Self::combine(&members, op, dtype, &inputs) {
                    Ok(r) => Some(r),
                    Err(Error::Shape(_)) => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            let status = if status == CCL_OK && results.is_none() {
                CCL_ERR_SHAPE
            } else {
                status
            };

            let link = self.ccl_link(&members)?;
            let cost = ring_collective_cost_us(op, k, input.len() as u64, &link);
            let t_end = clocks.iter().cloned().fold(0.0, f64::max) + cost;

            for (i, &m) in members.iter().enumerate().skip(1) {
                let mut frame = vec![status];
                put_f64_le(&mut frame, t_end);
                if let Some(r) = &results {
                    frame.extend_from_slice(&r[i]);
                }
                self.ep.send_msg(m, Class::Coll, frame)?;
            }
            match status {
                CCL_OK => {
                    self.ep.clock.advance_to(t_end);
                    let bytes = results.unwrap().swap_remove(0);
                    let mut out = self.alloc(bytes.len(), Space::Device)?;
                    out.bytes_mut().copy_from_slice(&bytes);
                    Ok((out, cost))
                }
                CCL_ERR_SIZE => Err(Error::SizeMismatch {
                    send: inputs.iter().map(Vec::len).find(|&l| l != inputs[0].len()).unwrap_or(0),
                    recv: inputs[0].len(),
                }),
                _ => Err(Error::Shape(format!(
                    "collective {op:?} shapes invalid for {} bytes over {k} ranks",
                    input.len()
                ))),
            }
        } else {
            let mut msg = Vec::with_capacity(8 + input.len());
            put_f64_le(&mut msg, self.ep.clock.now_us());
            msg.extend_from_slice(input.bytes());
            self.ep.send_msg(leader, Class::Coll, msg)?;

            let frame = self.ep.recv_msg(leader, Class::Coll)?;
            let mut cur = Cursor::new(&frame);
            let status = cur.u8()?;
            let t_end = cur.f64_le()?;
            match status {
                CCL_OK => {
                    self.ep.clock.advance_to(t_end);
                    let n = cur.remaining();
                    let bytes = cur.bytes(n)?;
                    let mut out = self.alloc(bytes.len(), Space::Device)?;
                    out.bytes_mut().copy_from_slice(bytes);
                    let link = self.ccl_link(&members)?;
                    Ok((out, ring_collective_cost_us(op, k, input.len() as u64, &link)))
                }
                CCL_ERR_SIZE => Err(Error::SizeMismatch {
                    send: input.len(),
                    recv: 0,
                }),
                _ => Err(Error::Shape(format!(
                    "collective {op:?} shapes invalid for {} bytes over {k} ranks",
                    input.len()
                ))),
            }
        }
    }

    fn ccl_send(&mut self, dst: usize, payload: &DeviceBuffer) -> Result<TransferRecord> {
        let me = self.rank();
        if dst == me {
            return Err(Error::SelfSend(me));
        }
        if !self.directory.same_vendor(me, dst)? {
            return Err(Error::MixedVendorGroup(format!(
                "native CCL P2P {me}->{dst} crosses vendors; use the heterogeneous path"
            )));
        }
        let mut msg = Vec::with_capacity(8 + payload.len());
        put_f64_le(&mut msg, self.ep.clock.now_us());
        msg.extend_from_slice(payload.bytes());
        self.ep.send_msg(dst, Class::Coll, msg)?;
        // Receiver computes placement and replies with the interval.
        let reply = self.ep.recv_msg(dst, Class::Coll)?;
        let mut cur = Cursor::new(&reply);
        let status = cur.u8()?;
        if status != 0 {
            let expected = cur.u64_le()? as usize;
            return Err(Error::SizeMismatch {
                send: payload.len(),
                recv: expected,
            });
        }
        let t_start = cur.f64_le()?;
        let t_end = cur.f64_le()?;
        self.ep.clock.advance_to(t_end);
        Ok(ccl_record(me, dst, payload.len(), t_start, t_end, self.cross_node_with(dst)?))
    }

    fn ccl_recv(&mut self, src: usize, size: usize) -> Result<(DeviceBuffer, TransferRecord)> {
        let me = self.rank();
        if src == me {
            return Err(Error::SelfSend(me));
        }
        if !self.directory.same_vendor(me, src)? {
            return Err(Error::MixedVendorGroup(format!(
                "native CCL P2P {src}->{me} crosses vendors; use the heterogeneous path"
            )));
        }
        let msg = self.ep.recv_msg(src, Class::Coll)?;
        let mut cur = Cursor::new(&msg);
        let sender_clock = cur.f64_le()?;
        let n = cur.remaining();
        if n != size {
            let mut nak = vec![1u8];
            put_u64_le(&mut nak, size as u64);
            self.ep.send_msg(src, Class::Coll, nak)?;
            return Err(Error::SizeMismatch { send: n, recv: size });
        }
        let bytes = cur.bytes(n)?;
        let mut out = self.alloc(size, Space::Device)?;
        out.bytes_mut().copy_from_slice(bytes);

        let cross = self.cross_node_with(src)?;
        let link = if cross {
            self.nic_link_between(src, me)?
        } else {
            *self
                .topology
                .link(self.directory.entry(me)?.node_id, LinkKind::IntraNodeFabric)?
        };
        let dur = wire_time_us(&link, size as u64);
        let ready = sender_clock.max(self.ep.clock.now_us());
        let t_start = if cross {
            let e_src = self.directory.entry(src)?;
            let e_dst = self.directory.entry(me)?;
            self.ep.shared().reserve_nic(
                NicKey { node_id: e_src.node_id, nic_id: e_src.nic_id, dir: NicDir::Tx },
                NicKey { node_id: e_dst.node_id, nic_id: e_dst.nic_id, dir: NicDir::Rx },
                ready,
                dur,
            )
        } else {
            ready
        };
        let t_end = t_start + dur;
        self.ep.clock.advance_to(t_end);

        let mut reply = vec![0u8];
        put_f64_le(&mut reply, t_start);
        put_f64_le(&mut reply, t_end);
        self.ep.send_msg(src, Class::Coll, reply)?;

        let rec = ccl_record(src, me, size, t_start, t_end, cross);
        self.ep.shared().record(rec.clone());
        Ok((out, rec))
    }
}

impl SimRank {
    fn cross_node_with(&self, other: usize) -> Result<bool> {
        Ok(self.directory.entry(self.rank())?.node_id != self.directory.entry(other)?.node_id)
    }
}

fn ccl_record(
    src: usize,
    dst: usize,
    size: usize,
    t_start: f64,
    t_end: f64,
    cross_node: bool,
) -> TransferRecord {
    TransferRecord {
        src_rank: src,
        dst_rank: dst,
        path: RecordPath::Ccl,
        size_bytes: size as u64,
        t_start_us: t_start,
        t_end_us: t_end,
        segments: vec![Segment {
            kind: if cross_node {
                SegmentKind::NicNetwork
            } else {
                SegmentKind::IntraNodeFabric
            },
            t_start_us: t_start,
            t_end_us: t_end,
        }],
        seq: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run_world;
    use crate::topology;
    use crate::wire::{bytes_to_f64s, f64s_to_bytes};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f32s_to_bytes(vals: &[f32]) -> Vec<u8> {
        vals.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    fn i64s_to_bytes(vals: &[i64]) -> Vec<u8> {
        vals.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn bytes_to_i64s(bytes: &[u8]) -> Vec<i64> {
        bytes
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    fn ulp_distance_f32(a: f32, b: f32) -> u32 {
        let ai = a.to_bits() as i64;
        let bi = b.to_bits() as i64;
        // Map to a monotone integer line (two's-complement trick).
        let am = if ai < 0 { i64::MIN.wrapping_sub(ai) } else { ai };
        let bm = if bi < 0 { i64::MIN.wrapping_sub(bi) } else { bi };
        am.abs_diff(bm).min(u32::MAX as u64) as u32
    }

    #[test]
    fn alloc_zero_initializes_and_tracks_cap() {
        let topo = Arc::new(topology::single_node("nvidia", 1).unwrap());
        let results = run_world(&topo, |mut r| {
            let buf = r.alloc(1024, Space::Device)?;
            assert_eq!(buf.len(), 1024);
            assert!(buf.bytes().iter().all(|&b| b == 0));
            let empty = r.alloc(0, Space::Host)?;
            assert!(empty.is_empty());

            r.set_mem_cap(Some(1 << 20));
            let err = r.alloc(2 << 20, Space::Device).unwrap_err();
            assert!(matches!(err, Error::Alloc { .. }));
            // Freeing returns budget.
            r.free(buf);
            Ok(())
        })
        .unwrap();
        assert_eq!(results.len(), 1);
    }

    #[test]
    fn copy_durations_match_bandwidths() {
        let topo = Arc::new(topology::single_node("amd", 1).unwrap()); // mem 3000, host 64
        run_world(&topo, |mut r| {
            let src = r.alloc(1 << 30, Space::Device)?;
            let mut chunk = r.alloc(1 << 30, Space::Chunk)?;
            let (ev, dur) = r.copy(&src, &mut chunk, 1 << 30)?;
            assert!(r.event_complete(ev));
            // 2^30 bytes at 3000 GB/s: ~357.9 µs.
            let expect = (1u64 << 30) as f64 / (3000.0 * 1e3);
            assert_eq!(dur, expect);
            assert!((dur - 357.9139413).abs() < 1e-3);

            let mut host = r.alloc(1 << 30, Space::Host)?;
            let (_, dur) = r.copy(&src, &mut host, 1 << 30)?;
            // 2^30 bytes at 64 GB/s: ~16.8 ms.
            assert_eq!(dur, (1u64 << 30) as f64 / (64.0 * 1e3));
            assert!((dur / 1e3 - 16.777216).abs() < 1e-6);

            // Zero-byte copy: zero duration, dst untouched.
            let mut dst = r.alloc(8, Space::Device)?;
            dst.bytes_mut().copy_from_slice(&[7; 8]);
            let (_, dur) = r.copy(&src, &mut dst, 0)?;
            assert_eq!(dur, 0.0);
            assert_eq!(dst.bytes(), &[7; 8]);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn copy_duration_is_linear_in_size() {
        let topo = Arc::new(topology::single_node("nvidia", 1).unwrap());
        run_world(&topo, |mut r| {
            let src = r.alloc(1 << 20, Space::Device)?;
            let mut dst = r.alloc(1 << 20, Space::Chunk)?;
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..50 {
                let a = rng.gen_range(1..1 << 20);
                let (_, da) = r.copy(&src, &mut dst, a)?;
                let (_, d2a) = r.copy_range(&src, 0, &mut dst, 0, a / 2)?;
                // zero intercept and linear: t(a/2) == t(a)/2 up to rounding
                assert!((d2a - da * (a / 2) as f64 / a as f64).abs() < 1e-12 * da.max(1.0));
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn register_requires_chunk_space_and_keys_are_fresh() {
        let topo = Arc::new(topology::single_node("nvidia", 1).unwrap());
        run_world(&topo, |mut r| {
            let dev = r.alloc(64, Space::Device)?;
            let err = r.register(dev).unwrap_err();
            assert!(matches!(err, Error::WrongSpace { .. }));

            let chunk = r.alloc(64, Space::Chunk)?;
            let mr1 = r.register(chunk)?;
            let back = r.deregister(mr1)?;
            let mr2 = r.register(back)?;
            assert_ne!(mr1.key(), mr2.key());
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn qp_transfer_delivers_and_times_out_without_sender() {
        let topo = Arc::new(topology::two_node(1)); // ranks 0,1 across nodes
        let results = run_world(&topo, |mut r| {
            let me = r.rank();
            let peer = 1 - me;
            let qp = r.create_qp(peer)?;
            if me == 0 {
                let slot = r.alloc(4 << 20, Space::Chunk)?;
                let mr = r.register(slot)?;
                let payload: Vec<u8> = (0..4 << 20).map(|i| (i % 251) as u8).collect();
                r.mr_write(mr, 0, &payload)?;
                let ev = r.post_send(qp, mr, 4 << 20)?;
                assert!(!r.event_complete(ev));
                let dur = r.qp_wait(ev)?;
                assert!(r.event_complete(ev));
                // 5 µs + 4 MiB at 100 GB/s: ~46.9 µs.
                assert!((dur - 46.94304).abs() < 1e-9, "got {dur}");
                Ok(payload)
            } else {
                let slot = r.alloc(4 << 20, Space::Chunk)?;
                let mr = r.register(slot)?;
                let ev = r.post_recv(qp, mr, 4 << 20)?;
                let dur = r.qp_wait(ev)?;
                assert!((dur - 46.94304).abs() < 1e-9);
                Ok(r.mr_bytes(mr)?.to_vec())
            }
        })
        .unwrap();
        assert_eq!(results[0], results[1]);
    }

    #[test]
    fn qp_recv_without_send_stays_pending() {
        let topo = Arc::new(topology::two_node(1));
        run_world(&topo, |mut r| {
            if r.rank() == 1 {
                r.endpoint_mut().set_timeout(std::time::Duration::from_millis(50));
                let qp = r.create_qp(0)?;
                let slot = r.alloc(16, Space::Chunk)?;
                let mr = r.register(slot)?;
                let ev = r.post_recv(qp, mr, 16)?;
                let err = r.qp_wait(ev).unwrap_err();
                assert!(matches!(err, Error::Timeout(_)));
                assert!(!r.event_complete(ev)); // still pending, never completed
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn qp_size_mismatch_fails_both_sides() {
        let topo = Arc::new(topology::two_node(1));
        let results = run_world(&topo, |mut r| {
            let me = r.rank();
            let peer = 1 - me;
            let qp = r.create_qp(peer)?;
            let slot = r.alloc(8, Space::Chunk)?;
            let mr = r.register(slot)?;
            if me == 0 {
                let ev = r.post_send(qp, mr, 8)?;
                Ok(r.qp_wait(ev).unwrap_err())
            } else {
                let ev = r.post_recv(qp, mr, 4)?;
                Ok(r.qp_wait(ev).unwrap_err())
            }
        })
        .unwrap();
        for e in results {
            assert!(matches!(e, Error::SizeMismatch { send: 8, recv: 4 }));
        }
    }

    #[test]
    fn qp_completions_follow_post_order() {
        let topo = Arc::new(topology::two_node(1));
        run_world(&topo, |mut r| {
            let me = r.rank();
            let peer = 1 - me;
            let qp = r.create_qp(peer)?;
            let mrs: Vec<MrHandle> = (0..4)
                .map(|i| {
                    let mut slot = r.alloc(4, Space::Chunk).unwrap();
                    slot.bytes_mut().copy_from_slice(&[i as u8; 4]);
                    r.register(slot).unwrap()
                })
                .collect();
            if me == 0 {
                let evs: Vec<_> = mrs.iter().map(|&m| r.post_send(qp, m, 4).unwrap()).collect();
                // Wait on the LAST event; earlier ones must complete first.
                r.qp_wait(evs[3])?;
                for ev in &evs {
                    assert!(r.event_complete(*ev));
                }
            } else {
                let evs: Vec<_> = mrs.iter().map(|&m| r.post_recv(qp, m, 4).unwrap()).collect();
                r.qp_wait(evs[3])?;
                for (i, &m) in mrs.iter().enumerate() {
                    assert_eq!(r.mr_bytes(m)?, &[i as u8; 4], "in-order delivery");
                }
                for ev in evs {
                    assert!(r.event_complete(ev));
                }
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn closed_qp_rejects_posts() {
        let topo = Arc::new(topology::two_node(1));
        run_world(&topo, |mut r| {
            if r.rank() == 0 {
                let qp = r.create_qp(1)?;
                let slot = r.alloc(4, Space::Chunk)?;
                let mr = r.register(slot)?;
                r.close_qp(qp);
                assert!(matches!(
                    r.post_send(qp, mr, 4).unwrap_err(),
                    Error::QpClosed { remote: 1 }
                ));
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn allreduce_of_rank_scalars_sums() {
        let topo = Arc::new(topology::single_node("nvidia", 4).unwrap());
        let results = run_world(&topo, |mut r| {
            let mut buf = r.alloc(8, Space::Device)?;
            buf.bytes_mut()
                .copy_from_slice(&i64s_to_bytes(&[r.rank() as i64]));
            let (out, dur) = r.ccl_collective(&[0, 1, 2, 3], CclOp::AllreduceSum, &buf, Dtype::I64)?;
            Ok((bytes_to_i64s(out.bytes()), dur))
        })
        .unwrap();
        for (vals, dur) in &results {
            // брute force: 0+1+2+3 = 6 on every rank
            assert_eq!(vals, &vec![6i64]);
            // ring cost: 2*(3/4)*8/(900e3) + 3*1 µs
            let expect = 2.0 * 0.75 * 8.0 / (900.0 * 1e3) + 3.0;
            assert!((dur - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn collectives_match_brute_force_oracle() {
        // Single-vendor groups of 1..4 ranks, i64 and f32 payloads, against
        // an oracle that gathers all inputs and reduces ascending.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for world in 1..=4usize {
            let topo = Arc::new(topology::single_node("amd", world).unwrap());
            let elems = 16;
            let inputs: Vec<Vec<f32>> = (0..world)
                .map(|_| (0..elems).map(|_| rng.gen_range(-10.0..10.0)).collect())
                .collect();
            let inputs2 = inputs.clone();
            let members: Vec<usize> = (0..world).collect();
            let members2 = members.clone();
            let results = run_world(&topo, move |mut r| {
                let mut buf = r.alloc(elems * 4, Space::Device)?;
                buf.bytes_mut()
                    .copy_from_slice(&f32s_to_bytes(&inputs2[r.rank()]));
                let (out, _) =
                    r.ccl_collective(&members2, CclOp::AllreduceSum, &buf, Dtype::F32)?;
                Ok(bytes_to_f32s(out.bytes()))
            })
            .unwrap();
            // Oracle: ascending-rank sequential fold.
            let mut expect = inputs[0].clone();
            for r in &inputs[1..] {
                for (a, b) in expect.iter_mut().zip(r) {
                    *a += b;
                }
            }
            for got in results {
                for (g, e) in got.iter().zip(&expect) {
                    assert!(
                        ulp_distance_f32(*g, *e) <= 4 * world as u32,
                        "{g} vs {e} beyond {world}*4 ulp"
                    );
                }
            }
        }
    }

    #[test]
    fn allgather_broadcast_reducescatter_semantics() {
        let topo = Arc::new(topology::single_node("nvidia", 4).unwrap());
        let results = run_world(&topo, |mut r| {
            let me = r.rank() as i64;
            let mut one = r.alloc(8, Space::Device)?;
            one.bytes_mut().copy_from_slice(&i64s_to_bytes(&[me]));
            let (ag, _) = r.ccl_collective(&[0, 1, 2, 3], CclOp::Allgather, &one, Dtype::I64)?;

            let mut four = r.alloc(32, Space::Device)?;
            four.bytes_mut()
                .copy_from_slice(&i64s_to_bytes(&[1, 1, 1, 1]));
            let (rs, _) =
                r.ccl_collective(&[0, 1, 2, 3], CclOp::ReducescatterSum, &four, Dtype::I64)?;

            let mut b = r.alloc(8, Space::Device)?;
            b.bytes_mut().copy_from_slice(&i64s_to_bytes(&[if r.rank() == 2 {
                42
            } else {
                0
            }]));
            let (bc, _) =
                r.ccl_collective(&[0, 1, 2, 3], CclOp::Broadcast { root: 2 }, &b, Dtype::I64)?;
            Ok((
                bytes_to_i64s(ag.bytes()),
                bytes_to_i64s(rs.bytes()),
                bytes_to_i64s(bc.bytes()),
            ))
        })
        .unwrap();
        for (ag, rs, bc) in results {
            assert_eq!(ag, vec![0, 1, 2, 3]);
            assert_eq!(rs, vec![4]); // all-ones summed over 4 ranks, one shard each
            assert_eq!(bc, vec![42]);
        }
    }

    #[test]
    fn broadcast_on_group_of_one_is_identity() {
        let topo = Arc::new(topology::single_node("nvidia", 1).unwrap());
        run_world(&topo, |mut r| {
            let mut buf = r.alloc(16, Space::Device)?;
            buf.bytes_mut().copy_from_slice(&f64s_to_bytes(&[1.5, -2.5]));
            let (out, dur) =
                r.ccl_collective(&[0], CclOp::Broadcast { root: 0 }, &buf, Dtype::F64)?;
            assert_eq!(bytes_to_f64s(out.bytes()), vec![1.5, -2.5]);
            assert_eq!(dur, 0.0);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn mixed_vendor_group_is_refused() {
        let topo = Arc::new(topology::two_node(2)); // ranks 0-1 nvidia, 2-3 amd
        let results = run_world(&topo, |mut r| {
            let buf = r.alloc(8, Space::Device)?;
            Ok(r.ccl_collective(&[0, 1, 2, 3], CclOp::AllreduceSum, &buf, Dtype::I64)
                .unwrap_err())
        })
        .unwrap();
        for e in results {
            assert!(matches!(e, Error::MixedVendorGroup(_)));
        }
    }

    #[test]
    fn ccl_p2p_delivers_same_vendor_and_refuses_cross() {
        let topo = Arc::new(topology::two_node(2));
        let results = run_world(&topo, |mut r| {
            let me = r.rank();
            // Same-vendor pair 0->1 (node 0); cross-vendor attempt 0->2.
            match me {
                0 => {
                    let mut buf = r.alloc(1024, Space::Device)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(77);
                    rng.fill(buf.bytes_mut());
                    let rec = r.ccl_send(1, &buf)?;
                    assert_eq!(rec.segments.len(), 1);
                    assert_eq!(rec.segments[0].kind, SegmentKind::IntraNodeFabric);
                    let err = r.ccl_send(2, &buf).unwrap_err();
                    assert!(matches!(err, Error::MixedVendorGroup(_)));
                    Ok(buf.bytes().to_vec())
                }
                1 => {
                    let (out, rec) = r.ccl_recv(0, 1024)?;
                    assert_eq!(rec.path, RecordPath::Ccl);
                    Ok(out.bytes().to_vec())
                }
                _ => Ok(Vec::new()),
            }
        })
        .unwrap();
        assert_eq!(results[0], results[1]);
    }

    #[test]
    fn ccl_p2p_zero_bytes_delivers_empty() {
        let topo = Arc::new(topology::single_node("amd", 2).unwrap());
        run_world(&topo, |mut r| {
            if r.rank() == 0 {
                let buf = r.alloc(0, Space::Device)?;
                r.ccl_send(1, &buf)?;
            } else {
                let (out, _) = r.ccl_recv(0, 0)?;
                assert!(out.is_empty());
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn collective_determinism_is_bitwise() {
        let topo = Arc::new(topology::single_node("nvidia", 3).unwrap());
        let run = || {
            run_world(&topo, |mut r| {
                let vals: Vec<f32> = (0..32).map(|i| (i as f32 + 0.1) * (r.rank() as f32 - 1.3)).collect();
                let mut buf = r.alloc(128, Space::Device)?;
                buf.bytes_mut().copy_from_slice(&f32s_to_bytes(&vals));
                let (out, _) = r.ccl_collective(&[0, 1, 2], CclOp::AllreduceSum, &buf, Dtype::F32)?;
                Ok(out.bytes().to_vec())
            })
            .unwrap()
        };
        assert_eq!(run(), run());
    }
}
