//! Heterogeneous point-to-point transfers.
//!
//! Two paths move bytes between ranks of different vendors:
//!
//! * `cpu_forwarding` stages every chunk through host memory:
//!   device-to-host copy, host-side network transfer, host-to-device copy.
//! * `device_direct` keeps the data plane on the device: device-to-device
//!   copy into a registered chunk buffer, NIC transfer straight out of the
//!   registered region, and a device-side copy out on the receiver. The
//!   host only runs control (registration, matching, completion); no
//!   host-space segment ever appears in the transfer record.
//!
//! Both paths cut the payload into fixed-size chunks and pipeline the
//! three stages; total simulated time follows the fill/drain schedule in
//! [`crate::transport::pipeline_schedule`]. Chunk headers are
//! control-plane metadata and carry no data-plane cost.
//!
//! [`dispatch_send`]/[`dispatch_recv`] route same-vendor pairs to the
//! vendor CCL transport and cross-vendor pairs to the configured
//! heterogeneous path.

use crate::adaptors::{CclAdaptor, DeviceAdaptor, NetAdaptor, SimRank, Space};
use crate::adaptors::{DeviceBuffer, MrHandle, QpHandle};
use crate::error::{Error, Result};
use crate::topology::{ClusterTopology, LinkKind, LinkSpec};
use crate::transport::{
    pipeline_schedule, Class, NicDir, NicKey, RecordPath, Segment, SegmentKind, Tag,
    TransferRecord,
};
use crate::wire::{put_f64_le, put_u32_be, put_u64_le, Cursor};

// ---------------------------------------------------------------------------
// Path and chunk configuration
// ---------------------------------------------------------------------------

/// Which heterogeneous transfer pipeline to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransferPath {
    CpuForwarding,
    DeviceDirect,
}

impl TransferPath {
    pub fn tag(self) -> u8 {
        match self {
            TransferPath::CpuForwarding => 0,
            TransferPath::DeviceDirect => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(TransferPath::CpuForwarding),
            1 => Ok(TransferPath::DeviceDirect),
            other => Err(Error::Parse(format!("unknown path tag {other}"))),
        }
    }

    pub fn record_path(self) -> RecordPath {
        match self {
            TransferPath::CpuForwarding => RecordPath::CpuForwarding,
            TransferPath::DeviceDirect => RecordPath::DeviceDirect,
        }
    }
}

impl std::fmt::Display for TransferPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransferPath::CpuForwarding => f.write_str("cpu_forwarding"),
            TransferPath::DeviceDirect => f.write_str("device_direct"),
        }
    }
}

impl std::str::FromStr for TransferPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpu" | "cpu_forwarding" => Ok(TransferPath::CpuForwarding),
            "direct" | "device_direct" => Ok(TransferPath::DeviceDirect),
            other => Err(Error::Spec(format!("unknown transfer path '{other}'"))),
        }
    }
}

/// Chunk pipeline geometry. The defaults (4 MiB chunks, double buffering)
/// are large enough to amortize per-chunk latency and small enough to
/// pipeline; both are sweep-exposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkConfig {
    pub chunk_size_bytes: usize,
    pub chunks_in_flight: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig {
            chunk_size_bytes: 4 << 20,
            chunks_in_flight: 2,
        }
    }
}

impl ChunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size_bytes == 0 {
            return Err(Error::Validation("chunk_size_bytes must be > 0".into()));
        }
        if self.chunks_in_flight == 0 {
            return Err(Error::Validation("chunks_in_flight must be >= 1".into()));
        }
        Ok(())
    }
}

/// Globally configured route for `dispatch_send`/`dispatch_recv`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommConfig {
    /// Path used for cross-vendor pairs.
    pub path: TransferPath,
    pub chunk: ChunkConfig,
}

impl Default for CommConfig {
    fn default() -> Self {
        CommConfig {
            path: TransferPath::DeviceDirect,
            chunk: ChunkConfig::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Chunk frame wire format
// ---------------------------------------------------------------------------

/// Chunk frame magic, spelled "HCPC" on the wire.
pub const CHUNK_MAGIC: u32 = 0x48435043;
/// magic (4) + path tag (1) + index (4) + total (4) + payload length (4).
pub const CHUNK_HEADER_LEN: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkHeader {
    pub path: TransferPath,
    pub index: u32,
    pub total: u32,
    pub payload_len: u32,
}

pub fn encode_chunk_header(h: &ChunkHeader) -> [u8; CHUNK_HEADER_LEN] {
    let mut out = Vec::with_capacity(CHUNK_HEADER_LEN);
    put_u32_be(&mut out, CHUNK_MAGIC);
    out.push(h.path.tag());
    put_u32_be(&mut out, h.index);
    put_u32_be(&mut out, h.total);
    put_u32_be(&mut out, h.payload_len);
    out.try_into().expect("header is 17 bytes")
}

pub fn decode_chunk_header(bytes: &[u8]) -> Result<ChunkHeader> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.u32_be()?;
    if magic != CHUNK_MAGIC {
        return Err(Error::Parse(format!(
            "bad chunk magic {magic:#010x}, expected {CHUNK_MAGIC:#010x}"
        )));
    }
    let path = TransferPath::from_tag(cur.u8()?)?;
    Ok(ChunkHeader {
        path,
        index: cur.u32_be()?,
        total: cur.u32_be()?,
        payload_len: cur.u32_be()?,
    })
}

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

/// Payload sizes of each chunk; a zero-byte transfer still moves one
/// (empty) chunk so the handshake and latency terms apply.
pub fn chunk_sizes(total: usize, chunk_size: usize) -> Vec<usize> {
    if total == 0 {
        return vec![0];
    }
    let full = total / chunk_size;
    let rest = total % chunk_size;
    let mut out = vec![chunk_size; full];
    if rest > 0 {
        out.push(rest);
    }
    out
}

/// NIC link between two ranks' nodes: bottleneck bandwidth, larger latency.
pub fn nic_link_between(topo: &ClusterTopology, a: usize, b: usize) -> Result<LinkSpec> {
    let la = *topo.link(topo.device_of_rank(a)?.node_id, LinkKind::NicNetwork)?;
    let lb = *topo.link(topo.device_of_rank(b)?.node_id, LinkKind::NicNetwork)?;
    LinkSpec::new(
        LinkKind::NicNetwork,
        la.bandwidth_gbps.min(lb.bandwidth_gbps),
        la.latency_us.max(lb.latency_us),
    )
}

/// Per-chunk stage durations of a transfer: `[ingress copy, wire, egress
/// copy]`. Ingress/egress run at the endpoints' host-bridge bandwidth on
/// the forwarding path and at device memory bandwidth on the direct path;
/// the wire stage pays NIC latency plus payload over the bottleneck NIC
/// bandwidth either way.
pub fn transfer_stage_grid(
    topo: &ClusterTopology,
    src: usize,
    dst: usize,
    size: usize,
    path: TransferPath,
    cfg: &ChunkConfig,
) -> Result<[Vec<f64>; 3]> {
    cfg.validate()?;
    let s = topo.device_of_rank(src)?;
    let d = topo.device_of_rank(dst)?;
    let link = nic_link_between(topo, src, dst)?;
    let (in_bw, out_bw) = match path {
        TransferPath::CpuForwarding => (s.host_bw_gbps, d.host_bw_gbps),
        TransferPath::DeviceDirect => (s.mem_bw_gbps, d.mem_bw_gbps),
    };
    let mut ingress = Vec::new();
    let mut wire = Vec::new();
    let mut egress = Vec::new();
    for c in chunk_sizes(size, cfg.chunk_size_bytes) {
        ingress.push(c as f64 / (in_bw * 1e3));
        wire.push(link.latency_us + c as f64 / (link.bandwidth_gbps * 1e3));
        egress.push(c as f64 / (out_bw * 1e3));
    }
    Ok([ingress, wire, egress])
}

/// Total simulated duration of a transfer, without running it. A real
/// transfer of the same parameters reports exactly this value.
pub fn path_time_us(
    topo: &ClusterTopology,
    src: usize,
    dst: usize,
    size: usize,
    path: TransferPath,
    cfg: &ChunkConfig,
) -> Result<f64> {
    let grid = transfer_stage_grid(topo, src, dst, size, path, cfg)?;
    Ok(pipeline_schedule(&grid).0)
}

fn segment_kinds(path: TransferPath) -> [SegmentKind; 3] {
    match path {
        TransferPath::CpuForwarding => [
            SegmentKind::HostBridge,
            SegmentKind::NicNetwork,
            SegmentKind::HostBridge,
        ],
        TransferPath::DeviceDirect => [
            SegmentKind::DeviceCopy,
            SegmentKind::NicNetwork,
            SegmentKind::DeviceCopy,
        ],
    }
}

fn build_record(
    topo: &ClusterTopology,
    src: usize,
    dst: usize,
    size: usize,
    path: TransferPath,
    cfg: &ChunkConfig,
    t_start: f64,
) -> Result<TransferRecord> {
    let grid = transfer_stage_grid(topo, src, dst, size, path, cfg)?;
    let (total, intervals) = pipeline_schedule(&grid);
    let kinds = segment_kinds(path);
    let chunks = grid[0].len();
    let mut segments = Vec::with_capacity(3 * chunks);
    for c in 0..chunks {
        for (s, kind) in kinds.iter().enumerate() {
            let (a, b) = intervals[s][c];
            segments.push(Segment {
                kind: *kind,
                t_start_us: t_start + a,
                t_end_us: t_start + b,
            });
        }
    }
    Ok(TransferRecord {
        src_rank: src,
        dst_rank: dst,
        path: path.record_path(),
        size_bytes: size as u64,
        t_start_us: t_start,
        t_end_us: t_start + total,
        segments,
        seq: 0,
    })
}

// ---------------------------------------------------------------------------
// Control frames
// ---------------------------------------------------------------------------

const ACK_OK: u8 = 0;
const ACK_SIZE_MISMATCH: u8 = 1;
const ACK_PATH_MISMATCH: u8 = 2;
const ACK_PROTOCOL: u8 = 3;

fn rtr_frame(size: usize, clock: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    put_u64_le(&mut out, size as u64);
    put_f64_le(&mut out, clock);
    out
}

/// The go frame carries the first chunk's header so the receiver checks
/// the path tag at match time, before any data-plane stage runs.
fn go_frame(status: u8, n_chunks: u32, clock: f64, first_header: &[u8]) -> Vec<u8> {
    let mut out = vec![status];
    put_u32_be(&mut out, n_chunks);
    put_f64_le(&mut out, clock);
    out.extend_from_slice(first_header);
    out
}

fn fin_frame(t_start: f64, t_end: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    put_f64_le(&mut out, t_start);
    put_f64_le(&mut out, t_end);
    out
}

fn ack_error(ack: &[u8], my_path: TransferPath, my_size: usize) -> Error {
    match ack.first().copied() {
        Some(ACK_PATH_MISMATCH) => {
            let sent = ack
                .get(1)
                .copied()
                .and_then(|t| TransferPath::from_tag(t).ok())
                .map_or("unknown".to_string(), |p| p.to_string());
            Error::PathMismatch {
                send: sent,
                recv: my_path.to_string(),
            }
        }
        Some(ACK_SIZE_MISMATCH) => Error::SizeMismatch {
            send: my_size,
            recv: 0,
        },
        other => Error::Parse(format!("unexpected chunk ack status {other:?}")),
    }
}

// ---------------------------------------------------------------------------
// Staging buffers
// ---------------------------------------------------------------------------

enum Staging {
    /// Registered chunk-space slots plus the queue pair (device-direct).
    Registered { mrs: Vec<MrHandle>, qp: QpHandle },
    /// Host-space slots (CPU forwarding).
    Host { slots: Vec<DeviceBuffer> },
}

impl Staging {
    fn new(
        r: &mut SimRank,
        peer: usize,
        path: TransferPath,
        slot_bytes: usize,
        count: usize,
    ) -> Result<Self> {
        match path {
            TransferPath::DeviceDirect => {
                let qp = r.create_qp(peer)?;
                let mut mrs = Vec::with_capacity(count);
                for _ in 0..count {
                    let buf = r.alloc(slot_bytes, Space::Chunk)?;
                    mrs.push(r.register(buf)?);
                }
                Ok(Staging::Registered { mrs, qp })
            }
            TransferPath::CpuForwarding => {
                let mut slots = Vec::with_capacity(count);
                for _ in 0..count {
                    slots.push(r.alloc(slot_bytes, Space::Host)?);
                }
                Ok(Staging::Host { slots })
            }
        }
    }

    fn release(self, r: &mut SimRank) -> Result<()> {
        match self {
            Staging::Registered { mrs, .. } => {
                for mr in mrs {
                    let buf = r.deregister(mr)?;
                    r.free(buf);
                }
            }
            Staging::Host { slots } => {
                for s in slots {
                    r.free(s);
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Transfer endpoints
// ---------------------------------------------------------------------------

/// Sends `payload` to `dst` over the chosen path. Blocks until the
/// receiver's matching [`p2p_recv`] completes; returns the transfer
/// record, which is also appended to the global trace (sender side only).
pub fn p2p_send(
    r: &mut SimRank,
    dst: usize,
    payload: &DeviceBuffer,
    path: TransferPath,
    cfg: &ChunkConfig,
) -> Result<TransferRecord> {
    let me = r.rank();
    if dst == me {
        return Err(Error::SelfSend(me));
    }
    cfg.validate()?;

    // Rendezvous: the receiver posts first.
    let rtr = r.endpoint_mut().recv_msg(dst, Class::P2pCtl)?;
    let mut cur = Cursor::new(&rtr);
    let expected = cur.u64_le()? as usize;
    let peer_clock = cur.f64_le()?;
    if expected != payload.len() {
        r.endpoint_mut()
            .send_msg(dst, Class::P2pCtl, go_frame(ACK_SIZE_MISMATCH, 0, 0.0, &[]))?;
        return Err(Error::SizeMismatch {
            send: payload.len(),
            recv: expected,
        });
    }

    let chunks = chunk_sizes(payload.len(), cfg.chunk_size_bytes);
    let n = chunks.len();
    let my_clock = r.clock_us();
    let first_header = encode_chunk_header(&ChunkHeader {
        path,
        index: 0,
        total: n as u32,
        payload_len: chunks[0] as u32,
    });
    r.endpoint_mut().send_msg(
        dst,
        Class::P2pCtl,
        go_frame(ACK_OK, n as u32, my_clock, &first_header),
    )?;
    // The receiver checked the path tag against what it posted.
    let header_ack = r.endpoint_mut().recv_msg(dst, Class::P2pAck)?;
    if header_ack.first() != Some(&ACK_OK) {
        return Err(ack_error(&header_ack, path, payload.len()));
    }

    let window = cfg.chunks_in_flight.min(n);
    let slot_bytes = CHUNK_HEADER_LEN + cfg.chunk_size_bytes;
    let mut staging = Staging::new(r, dst, path, slot_bytes, window)?;
    let chunk_stream = r.endpoint_mut().next_out_stream(dst, Class::P2pChunk);

    let mut acked = 0usize;
    let mut offset = 0usize;
    let mut outcome: Result<()> = Ok(());
    for (i, &len) in chunks.iter().enumerate() {
        // Flow control: at most `window` unacknowledged chunks in flight.
        let need = (i + 1).saturating_sub(window);
        while acked < need {
            let ack = r.endpoint_mut().recv_msg(dst, Class::P2pAck)?;
            if ack.first() != Some(&ACK_OK) {
                outcome = Err(ack_error(&ack, path, payload.len()));
                break;
            }
            acked += 1;
        }
        if outcome.is_err() {
            break;
        }

        let header = encode_chunk_header(&ChunkHeader {
            path,
            index: i as u32,
            total: n as u32,
            payload_len: len as u32,
        });
        match &mut staging {
            Staging::Registered { mrs, qp } => {
                let mr = mrs[i % window];
                r.mr_write(mr, 0, &header)?;
                r.copy_to_mr(payload, offset, mr, CHUNK_HEADER_LEN, len)?;
                let ev = r.post_send(*qp, mr, CHUNK_HEADER_LEN + len)?;
                r.qp_wait(ev)?;
            }
            Staging::Host { slots } => {
                let slot = &mut slots[i % window];
                slot.bytes_mut()[..CHUNK_HEADER_LEN].copy_from_slice(&header);
                r.copy_range(payload, offset, slot, CHUNK_HEADER_LEN, len)?;
                let frame = slot.bytes()[..CHUNK_HEADER_LEN + len].to_vec();
                r.endpoint_mut().send_tagged(
                    dst,
                    Tag {
                        class: Class::P2pChunk,
                        stream: chunk_stream,
                        index: i as u32,
                    },
                    frame,
                )?;
            }
        }
        offset += len;
    }

    // Drain outstanding acknowledgments.
    while outcome.is_ok() && acked < n {
        let ack = r.endpoint_mut().recv_msg(dst, Class::P2pAck)?;
        if ack.first() != Some(&ACK_OK) {
            outcome = Err(ack_error(&ack, path, payload.len()));
            break;
        }
        acked += 1;
    }
    staging.release(r)?;
    outcome?;

    // Timing: the whole chunk pipeline, placed on both endpoints' NICs.
    let total = path_time_us(r.topology(), me, dst, payload.len(), path, cfg)?;
    let ready = my_clock.max(peer_clock);
    let e_src = r.directory().entry(me)?.clone();
    let e_dst = r.directory().entry(dst)?.clone();
    let t_start = r.endpoint().shared().reserve_nic(
        NicKey {
            node_id: e_src.node_id,
            nic_id: e_src.nic_id,
            dir: NicDir::Tx,
        },
        NicKey {
            node_id: e_dst.node_id,
            nic_id: e_dst.nic_id,
            dir: NicDir::Rx,
        },
        ready,
        total,
    );
    let t_end = t_start + total;
    r.endpoint_mut()
        .send_msg(dst, Class::P2pCtl, fin_frame(t_start, t_end))?;
    r.endpoint_mut().clock.advance_to(t_end);

    let record = build_record(r.topology(), me, dst, payload.len(), path, cfg, t_start)?;
    r.endpoint().shared().record(record.clone());
    Ok(record)
}

/// Posts a receive of exactly `size` bytes from `src` over `path` and
/// blocks until delivery. Returns the payload and the transfer record.
pub fn p2p_recv(
    r: &mut SimRank,
    src: usize,
    size: usize,
    path: TransferPath,
    cfg: &ChunkConfig,
) -> Result<(DeviceBuffer, TransferRecord)> {
    let me = r.rank();
    if src == me {
        return Err(Error::SelfSend(me));
    }
    cfg.validate()?;

    let clock = r.clock_us();
    r.endpoint_mut()
        .send_msg(src, Class::P2pCtl, rtr_frame(size, clock))?;
    let go = r.endpoint_mut().recv_msg(src, Class::P2pCtl)?;
    let mut cur = Cursor::new(&go);
    if cur.u8()? == ACK_SIZE_MISMATCH {
        return Err(Error::SizeMismatch { send: 0, recv: size });
    }
    let n = cur.u32_be()? as usize;
    let _sender_clock = cur.f64_le()?;
    let first = decode_chunk_header(cur.bytes(CHUNK_HEADER_LEN)?)?;
    if first.path != path {
        r.endpoint_mut().send_msg(
            src,
            Class::P2pAck,
            vec![ACK_PATH_MISMATCH, first.path.tag()],
        )?;
        return Err(Error::PathMismatch {
            send: first.path.to_string(),
            recv: path.to_string(),
        });
    }
    let chunks = chunk_sizes(size, cfg.chunk_size_bytes);
    if chunks.len() != n {
        r.endpoint_mut()
            .send_msg(src, Class::P2pAck, vec![ACK_PROTOCOL])?;
        return Err(Error::Parse(format!(
            "sender announced {n} chunks, expected {}",
            chunks.len()
        )));
    }
    r.endpoint_mut()
        .send_msg(src, Class::P2pAck, vec![ACK_OK])?;

    let mut out = r.alloc(size, Space::Device)?;
    let window = cfg.chunks_in_flight.min(n);
    let slot_bytes = CHUNK_HEADER_LEN + cfg.chunk_size_bytes;
    let mut staging = Staging::new(r, src, path, slot_bytes, window)?;
    let chunk_stream = r.endpoint_mut().next_in_stream(src, Class::P2pChunk);

    let mut offset = 0usize;
    let mut outcome: Result<()> = Ok(());
    for (i, &len) in chunks.iter().enumerate() {
        let frame_len = CHUNK_HEADER_LEN + len;
        let header;
        match &mut staging {
            Staging::Registered { mrs, qp } => {
                let mr = mrs[i % window];
                let ev = r.post_recv(*qp, mr, frame_len)?;
                r.qp_wait(ev)?;
                header = decode_chunk_header(&r.mr_bytes(mr)?[..CHUNK_HEADER_LEN])?;
                if header.path == path {
                    r.copy_from_mr(mr, CHUNK_HEADER_LEN, &mut out, offset, len)?;
                }
            }
            Staging::Host { slots } => {
                let frame = r.endpoint_mut().recv_tagged(
                    src,
                    Tag {
                        class: Class::P2pChunk,
                        stream: chunk_stream,
                        index: i as u32,
                    },
                )?;
                if frame.len() != frame_len {
                    r.endpoint_mut()
                        .send_msg(src, Class::P2pAck, vec![ACK_PROTOCOL])?;
                    outcome = Err(Error::SizeMismatch {
                        send: frame.len().saturating_sub(CHUNK_HEADER_LEN),
                        recv: len,
                    });
                    break;
                }
                // The wire delivered the frame into host memory; stage it
                // and pay the host-to-device copy on the payload.
                slots[i % window].bytes_mut()[..frame_len].copy_from_slice(&frame);
                header = decode_chunk_header(&frame[..CHUNK_HEADER_LEN])?;
                if header.path == path {
                    r.copy_range(&slots[i % window], CHUNK_HEADER_LEN, &mut out, offset, len)?;
                }
            }
        }
        if let Err(e) = validate_chunk(&header, path, i, n, len) {
            let nak = match &e {
                Error::PathMismatch { .. } => vec![ACK_PATH_MISMATCH, header.path.tag()],
                _ => vec![ACK_PROTOCOL],
            };
            r.endpoint_mut().send_msg(src, Class::P2pAck, nak)?;
            outcome = Err(e);
            break;
        }
        r.endpoint_mut()
            .send_msg(src, Class::P2pAck, vec![ACK_OK])?;
        offset += len;
    }
    staging.release(r)?;
    outcome?;

    let fin = r.endpoint_mut().recv_msg(src, Class::P2pCtl)?;
    let mut cur = Cursor::new(&fin);
    let t_start = cur.f64_le()?;
    let t_end = cur.f64_le()?;
    r.endpoint_mut().clock.advance_to(t_end);

    let record = build_record(r.topology(), src, me, size, path, cfg, t_start)?;
    Ok((out, record))
}

fn validate_chunk(
    header: &ChunkHeader,
    posted_path: TransferPath,
    index: usize,
    total: usize,
    len: usize,
) -> Result<()> {
    if header.path != posted_path {
        return Err(Error::PathMismatch {
            send: header.path.to_string(),
            recv: posted_path.to_string(),
        });
    }
    if header.index as usize != index
        || header.total as usize != total
        || header.payload_len as usize != len
    {
        return Err(Error::Parse(format!(
            "chunk header {header:?} does not match expected index {index}/{total} len {len}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Routes a send: same-vendor pairs use the vendor CCL transport,
/// cross-vendor pairs the configured heterogeneous path.
pub fn dispatch_send(
    r: &mut SimRank,
    dst: usize,
    payload: &DeviceBuffer,
    cfg: &CommConfig,
) -> Result<TransferRecord> {
    let me = r.rank();
    if dst == me {
        return Err(Error::SelfSend(me));
    }
    if r.directory().same_vendor(me, dst)? {
        r.ccl_send(dst, payload)
    } else {
        p2p_send(r, dst, payload, cfg.path, &cfg.chunk)
    }
}

/// Receiving side of [`dispatch_send`].
pub fn dispatch_recv(
    r: &mut SimRank,
    src: usize,
    size: usize,
    cfg: &CommConfig,
) -> Result<(DeviceBuffer, TransferRecord)> {
    let me = r.rank();
    if src == me {
        return Err(Error::SelfSend(me));
    }
    if r.directory().same_vendor(me, src)? {
        r.ccl_recv(src, size)
    } else {
        p2p_recv(r, src, size, cfg.path, &cfg.chunk)
    }
}

/// NIC a rank's PP transfers use. With at least one NIC per device this
/// is the identity mapping; otherwise devices share NICs round-robin.
pub fn assign_nic(topo: &ClusterTopology, rank: usize) -> Result<usize> {
    Ok(topo.device_of_rank(rank)?.nic_id)
}
