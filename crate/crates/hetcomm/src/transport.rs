//! In-process message channels between rank contexts plus the
//! discrete-event cost model.
//!
//! Real bytes move through unbounded FIFO channels (one inbox per rank);
//! simulated time is a separate per-rank clock advanced explicitly by the
//! layers that know the overlap structure of what they model. Correctness
//! tests look at the bytes, performance tests look at the clock, and
//! neither depends on wall time.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::topology::LinkSpec;

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

/// Time in microseconds for one message of `size_bytes` over a link:
/// `latency + size / bandwidth`. 1 GB/s moves 1000 bytes per microsecond.
pub fn wire_time_us(link: &LinkSpec, size_bytes: u64) -> f64 {
    link.latency_us + size_bytes as f64 / (link.bandwidth_gbps * 1e3)
}

/// Total time of a chunked pipeline with uniform per-chunk stage times:
/// fill + drain, `sum(stages) + (num_chunks - 1) * max(stages)`.
pub fn pipelined_time_us(stage_times_us: &[f64], num_chunks: usize) -> f64 {
    assert!(num_chunks >= 1, "pipeline needs at least one chunk");
    let sum: f64 = stage_times_us.iter().sum();
    let max = stage_times_us.iter().cloned().fold(0.0, f64::max);
    sum + (num_chunks - 1) as f64 * max
}

/// General pipeline schedule for (possibly non-uniform) per-chunk stage
/// times. `stages[s][c]` is the duration of chunk `c` at stage `s`; every
/// stage must list the same chunk count. Chunk `c` may enter stage `s`
/// only after it leaves stage `s-1` and after chunk `c-1` leaves stage `s`.
///
/// Returns the total elapsed time and the absolute `(start, end)` interval
/// of every stage/chunk cell, both relative to time zero.
pub fn pipeline_schedule(stages: &[Vec<f64>]) -> (f64, Vec<Vec<(f64, f64)>>) {
    let chunks = stages.first().map_or(0, Vec::len);
    debug_assert!(stages.iter().all(|s| s.len() == chunks));
    let mut intervals: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(chunks); stages.len()];
    for c in 0..chunks {
        for s in 0..stages.len() {
            let after_prev_stage = if s == 0 { 0.0 } else { intervals[s - 1][c].1 };
            let after_prev_chunk = if c == 0 { 0.0 } else { intervals[s][c - 1].1 };
            let start = after_prev_stage.max(after_prev_chunk);
            intervals[s].push((start, start + stages[s][c]));
        }
    }
    let total = intervals
        .last()
        .and_then(|s| s.last())
        .map_or(0.0, |&(_, end)| end);
    (total, intervals)
}

// ---------------------------------------------------------------------------
// Simulated clock
// ---------------------------------------------------------------------------

/// Per-rank simulated clock in microseconds. Monotone non-decreasing;
/// never tied to wall time.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimClock {
    now_us: f64,
}

impl SimClock {
    pub fn now_us(&self) -> f64 {
        self.now_us
    }

    pub fn advance_by(&mut self, dur_us: f64) {
        debug_assert!(dur_us >= 0.0);
        self.now_us += dur_us;
    }

    /// Jump forward to `t_us`; going backwards is a no-op.
    pub fn advance_to(&mut self, t_us: f64) {
        if t_us > self.now_us {
            self.now_us = t_us;
        }
    }
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

/// Which pipeline stage a segment models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    /// Device-local copy between user and chunk buffers.
    DeviceCopy,
    /// Host <-> device staging copy.
    HostBridge,
    /// NIC wire transfer.
    NicNetwork,
    /// Intra-node fabric transfer (vendor CCL paths).
    IntraNodeFabric,
}

impl std::fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SegmentKind::DeviceCopy => f.write_str("device_copy"),
            SegmentKind::HostBridge => f.write_str("host_bridge"),
            SegmentKind::NicNetwork => f.write_str("nic_network"),
            SegmentKind::IntraNodeFabric => f.write_str("intra_node_fabric"),
        }
    }
}

/// Label for the route a recorded transfer took.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordPath {
    CpuForwarding,
    DeviceDirect,
    /// Vendor CCL transport (homogeneous P2P or collective).
    Ccl,
    /// Untimed raw channel payloads.
    Raw,
}

impl std::fmt::Display for RecordPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RecordPath::CpuForwarding => f.write_str("cpu_forwarding"),
            RecordPath::DeviceDirect => f.write_str("device_direct"),
            RecordPath::Ccl => f.write_str("ccl"),
            RecordPath::Raw => f.write_str("raw"),
        }
    }
}

/// One timed segment of a transfer, with absolute simulated times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub t_start_us: f64,
    pub t_end_us: f64,
}

/// Instrumentation record for one completed transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferRecord {
    pub src_rank: usize,
    pub dst_rank: usize,
    pub path: RecordPath,
    pub size_bytes: u64,
    pub t_start_us: f64,
    pub t_end_us: f64,
    pub segments: Vec<Segment>,
    /// Append order, used only to break sort ties.
    pub seq: u64,
}

impl TransferRecord {
    pub fn duration_us(&self) -> f64 {
        self.t_end_us - self.t_start_us
    }

    pub fn count_segments(&self, kind: SegmentKind) -> usize {
        self.segments.iter().filter(|s| s.kind == kind).count()
    }
}

/// CSV header shared by every trace export in the tool.
pub const TRACE_CSV_HEADER: &str = "t_start_us,t_end_us,src,dst,path,size_bytes,segment_kind";

/// Renders records as CSV, one row per segment, transfers ordered by
/// `(t_start, src, seq)`.
pub fn trace_to_csv(records: &[TransferRecord]) -> String {
    let mut sorted: Vec<&TransferRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.t_start_us
            .partial_cmp(&b.t_start_us)
            .unwrap()
            .then(a.src_rank.cmp(&b.src_rank))
            .then(a.seq.cmp(&b.seq))
    });
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for rec in sorted {
        for seg in &rec.segments {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                seg.t_start_us,
                seg.t_end_us,
                rec.src_rank,
                rec.dst_rank,
                rec.path,
                rec.size_bytes,
                seg.kind
            ));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// NIC occupancy ledger
// ---------------------------------------------------------------------------

/// TX/RX direction of a NIC reservation. The quoted bidirectional NIC
/// bandwidth is modeled as full duplex, so each direction has its own
/// timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NicDir {
    Tx,
    Rx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NicKey {
    pub node_id: usize,
    pub nic_id: usize,
    pub dir: NicDir,
}

/// Greedy per-NIC occupancy bookkeeping. A transfer holds its sender's
/// NIC TX timeline and its receiver's NIC RX timeline for its whole
/// duration; a chunked transfer keeps the NIC streaming in steady state,
/// so whole-duration occupancy is the honest first-order model. Transfers
/// on distinct NICs never delay each other.
#[derive(Debug, Default)]
struct NicLedger {
    next_free_us: HashMap<NicKey, f64>,
}

impl NicLedger {
    /// Places a transfer of `dur_us` no earlier than `earliest_us` on both
    /// endpoints' NIC timelines and returns the placed start time.
    fn reserve(&mut self, tx: NicKey, rx: NicKey, earliest_us: f64, dur_us: f64) -> f64 {
        let free_tx = self.next_free_us.get(&tx).copied().unwrap_or(0.0);
        let free_rx = self.next_free_us.get(&rx).copied().unwrap_or(0.0);
        let start = earliest_us.max(free_tx).max(free_rx);
        self.next_free_us.insert(tx, start + dur_us);
        self.next_free_us.insert(rx, start + dur_us);
        start
    }
}

// ---------------------------------------------------------------------------
// Channel fabric
// ---------------------------------------------------------------------------

/// Message class; each directed rank pair carries an independent FIFO
/// sequence counter per class, so matching is positional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Class {
    /// Bootstrap/control-plane messages (never traced, never timed).
    Boot,
    /// P2P transfer control (ready-to-receive, go/abort, completion).
    P2pCtl,
    /// P2P chunk frames on the host path.
    P2pChunk,
    /// Per-chunk acknowledgments of the P2P layer.
    P2pAck,
    /// Queue-pair data frames.
    QpData,
    /// Queue-pair acknowledgments.
    QpAck,
    /// Collective-internal gather/result messages.
    Coll,
    /// Raw `channel_send` payloads.
    Data,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tag {
    pub class: Class,
    pub stream: u64,
    pub index: u32,
}

#[derive(Debug)]
struct Envelope {
    src: usize,
    tag: Tag,
    payload: Vec<u8>,
}

/// Trace, NIC ledger, and record sequencing shared by a whole world.
#[derive(Debug, Default)]
pub struct FabricShared {
    trace: Mutex<Vec<TransferRecord>>,
    nic: Mutex<NicLedger>,
    record_seq: AtomicU64,
}

impl FabricShared {
    /// Appends a completed transfer to the global trace.
    pub fn record(&self, mut rec: TransferRecord) {
        rec.seq = self.record_seq.fetch_add(1, Ordering::Relaxed);
        self.trace.lock().unwrap().push(rec);
    }

    /// Snapshot of all records so far.
    pub fn trace(&self) -> Vec<TransferRecord> {
        self.trace.lock().unwrap().clone()
    }

    pub fn clear_trace(&self) {
        self.trace.lock().unwrap().clear();
    }

    /// See [`NicLedger::reserve`].
    pub fn reserve_nic(&self, tx: NicKey, rx: NicKey, earliest_us: f64, dur_us: f64) -> f64 {
        self.nic.lock().unwrap().reserve(tx, rx, earliest_us, dur_us)
    }
}

/// Per-rank handle onto the fabric: inbox, peers, clock, shared state.
pub struct Endpoint {
    rank: usize,
    world_size: usize,
    senders: Vec<mpsc::Sender<Envelope>>,
    rx: mpsc::Receiver<Envelope>,
    stash: VecDeque<Envelope>,
    out_seq: HashMap<(usize, Class), u64>,
    in_seq: HashMap<(usize, Class), u64>,
    closed: bool,
    /// This rank's simulated clock.
    pub clock: SimClock,
    shared: Arc<FabricShared>,
    timeout: Duration,
}

impl Endpoint {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn shared(&self) -> &Arc<FabricShared> {
        &self.shared
    }

    /// Wall-clock guard for blocking receives. This bounds how long the
    /// harness waits for a peer before surfacing a `Timeout`; it has no
    /// effect on simulated time.
    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    /// Allocates the next stream id for (peer, class) on the outgoing side.
    pub fn next_out_stream(&mut self, peer: usize, class: Class) -> u64 {
        let seq = self.out_seq.entry((peer, class)).or_insert(0);
        let v = *seq;
        *seq += 1;
        v
    }

    /// Allocates the next expected stream id on the incoming side.
    pub fn next_in_stream(&mut self, peer: usize, class: Class) -> u64 {
        let seq = self.in_seq.entry((peer, class)).or_insert(0);
        let v = *seq;
        *seq += 1;
        v
    }

    /// Sends raw bytes with an explicit tag.
    pub fn send_tagged(&mut self, dst: usize, tag: Tag, payload: Vec<u8>) -> Result<()> {
        if self.closed {
            return Err(Error::ChannelClosed(format!(
                "rank {} endpoint is closed",
                self.rank
            )));
        }
        let sender = self
            .senders
            .get(dst)
            .ok_or(Error::RankOutOfRange {
                rank: dst,
                world_size: self.world_size,
            })?;
        sender
            .send(Envelope {
                src: self.rank,
                tag,
                payload,
            })
            .map_err(|_| Error::ChannelClosed(format!("rank {dst} inbox is gone")))
    }

    /// Blocking receive of the exact `(src, tag)` message; anything else
    /// arriving in the meantime is stashed for later matches.
    pub fn recv_tagged(&mut self, src: usize, tag: Tag) -> Result<Vec<u8>> {
        if let Some(pos) = self
            .stash
            .iter()
            .position(|e| e.src == src && e.tag == tag)
        {
            return Ok(self.stash.remove(pos).unwrap().payload);
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            let remaining = deadline
                .checked_duration_since(Instant::now())
                .unwrap_or(Duration::ZERO);
            match self.rx.recv_timeout(remaining) {
                Ok(env) => {
                    if env.src == src && env.tag == tag {
                        return Ok(env.payload);
                    }
                    self.stash.push_back(env);
                }
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    return Err(Error::Timeout(format!(
                        "rank {} waited {:?} for {:?} from rank {}",
                        self.rank, self.timeout, tag, src
                    )));
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => {
                    return Err(Error::ChannelClosed(format!(
                        "rank {} inbox disconnected",
                        self.rank
                    )));
                }
            }
        }
    }

    /// Sends the next in-order message of `class` to `dst`.
    pub fn send_msg(&mut self, dst: usize, class: Class, payload: Vec<u8>) -> Result<()> {
        let stream = self.next_out_stream(dst, class);
        self.send_tagged(
            dst,
            Tag {
                class,
                stream,
                index: 0,
            },
            payload,
        )
    }

    /// Receives the next in-order message of `class` from `src`.
    pub fn recv_msg(&mut self, src: usize, class: Class) -> Result<Vec<u8>> {
        let stream = self.next_in_stream(src, class);
        self.recv_tagged(
            src,
            Tag {
                class,
                stream,
                index: 0,
            },
        )
    }

    /// Data-plane send: delivers `bytes` to `dst` intact and exactly once
    /// and appends the caller-built record to the global trace.
    pub fn channel_send(
        &mut self,
        dst: usize,
        bytes: Vec<u8>,
        record: TransferRecord,
    ) -> Result<()> {
        self.send_msg(dst, Class::Data, bytes)?;
        self.shared.record(record);
        Ok(())
    }

    /// Receives the next `channel_send` payload from `src`.
    pub fn channel_recv(&mut self, src: usize) -> Result<Vec<u8>> {
        self.recv_msg(src, Class::Data)
    }

    /// Marks the endpoint closed; later sends fail with `ChannelClosed`.
    pub fn close(&mut self) {
        self.closed = true;
    }
}

/// Builds a fully connected world of endpoints sharing one trace and NIC
/// ledger. Index `i` of the returned vector is rank `i`'s endpoint.
pub fn build_world(world_size: usize) -> (Vec<Endpoint>, Arc<FabricShared>) {
    let shared = Arc::new(FabricShared::default());
    let mut txs = Vec::with_capacity(world_size);
    let mut rxs = Vec::with_capacity(world_size);
    for _ in 0..world_size {
        let (tx, rx) = mpsc::channel();
        txs.push(tx);
        rxs.push(rx);
    }
    let endpoints = rxs
        .into_iter()
        .enumerate()
        .map(|(rank, rx)| Endpoint {
            rank,
            world_size,
            senders: txs.clone(),
            rx,
            stash: VecDeque::new(),
            out_seq: HashMap::new(),
            in_seq: HashMap::new(),
            closed: false,
            clock: SimClock::default(),
            shared: Arc::clone(&shared),
            timeout: Duration::from_secs(30),
        })
        .collect();
    (endpoints, shared)
}

/// Convenience: a record with no segments for raw channel payloads.
pub fn raw_record(src: usize, dst: usize, size_bytes: u64, t_us: f64) -> TransferRecord {
    TransferRecord {
        src_rank: src,
        dst_rank: dst,
        path: RecordPath::Raw,
        size_bytes,
        t_start_us: t_us,
        t_end_us: t_us,
        segments: Vec::new(),
        seq: 0,
    }
}
