//! Declarative description of the simulated heterogeneous cluster.
//!
//! A cluster is a list of nodes, each holding one or more devices of a
//! single vendor, an intra-node fabric, a host bridge (PCIe-class link
//! between device and host memory), and a set of NICs. Ranks map onto
//! devices in `(node_id, device_id)` lexicographic order, so ranks on one
//! node are contiguous.
//!
//! Topologies load from a TOML document; the key names under `[[nodes]]`
//! are part of the tool's contract (see `load_topology`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque vendor identifier. Equality is exact string match.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VendorId(String);

impl VendorId {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Validation("vendor id must be non-empty".into()));
        }
        Ok(VendorId(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for VendorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Built-in vendor calibration defaults. The two shipped vendors model an
/// NVIDIA-class node (faster per layer, faster device copies) and an
/// AMD-class node; unknown vendors fall back to a generic midrange profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VendorProfile {
    /// Device-local copy rate in GB/s (user buffer <-> chunk buffer).
    pub mem_bw_gbps: f64,
    /// Per-transformer-layer forward time in ms (calibration input).
    pub layer_time_fwd_ms: f64,
    /// Per-transformer-layer backward time in ms (calibration input).
    pub layer_time_bwd_ms: f64,
}

/// Name of the built-in fast vendor.
pub const VENDOR_NVIDIA: &str = "nvidia";
/// Name of the built-in slow vendor.
pub const VENDOR_AMD: &str = "amd";

impl VendorProfile {
    /// Default calibration for a vendor name. The built-in fast vendor is
    /// strictly faster per layer than the built-in slow vendor; the fitted
    /// fwd/bwd ratio between them is 1.133.
    pub fn for_vendor(name: &str) -> VendorProfile {
        match name {
            VENDOR_NVIDIA => VendorProfile {
                mem_bw_gbps: 6000.0,
                layer_time_fwd_ms: 1.0,
                layer_time_bwd_ms: 2.0,
            },
            VENDOR_AMD => VendorProfile {
                mem_bw_gbps: 3000.0,
                layer_time_fwd_ms: 1.133,
                layer_time_bwd_ms: 2.266,
            },
            _ => VendorProfile {
                mem_bw_gbps: 1000.0,
                layer_time_fwd_ms: 1.5,
                layer_time_bwd_ms: 3.0,
            },
        }
    }
}

/// Kind of a point-to-point link in the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkKind {
    /// Device-to-device fabric within one node (NVLink / Infinity-Fabric class).
    IntraNodeFabric,
    /// Host <-> device bridge (PCIe class).
    HostBridge,
    /// NIC-to-NIC network between nodes.
    NicNetwork,
}

impl std::fmt::Display for LinkKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LinkKind::IntraNodeFabric => f.write_str("intra_node_fabric"),
            LinkKind::HostBridge => f.write_str("host_bridge"),
            LinkKind::NicNetwork => f.write_str("nic_network"),
        }
    }
}

/// Bandwidth/latency pair for one link. Bandwidth is the usable rate per
/// direction (full duplex); quoted bidirectional figures are used as-is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub kind: LinkKind,
    /// GB/s, i.e. 1e9 bytes per second.
    pub bandwidth_gbps: f64,
    /// One-way latency in microseconds.
    pub latency_us: f64,
}

impl LinkSpec {
    pub fn new(kind: LinkKind, bandwidth_gbps: f64, latency_us: f64) -> Result<Self> {
        if !(bandwidth_gbps.is_finite() && bandwidth_gbps > 0.0) {
            return Err(Error::Validation(format!(
                "{kind} bandwidth must be finite and positive, got {bandwidth_gbps}"
            )));
        }
        if !(latency_us.is_finite() && latency_us >= 0.0) {
            return Err(Error::Validation(format!(
                "{kind} latency must be finite and non-negative, got {latency_us}"
            )));
        }
        Ok(LinkSpec {
            kind,
            bandwidth_gbps,
            latency_us,
        })
    }
}

/// One device (simulated GPU) in the cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceDescriptor {
    /// Index of the device within its node.
    pub device_id: usize,
    pub node_id: usize,
    pub vendor: VendorId,
    /// Device-local copy rate in GB/s.
    pub mem_bw_gbps: f64,
    /// Host <-> device rate in GB/s.
    pub host_bw_gbps: f64,
    /// Calibrated forward time per transformer layer, ms.
    pub layer_time_fwd_ms: f64,
    /// Calibrated backward time per transformer layer, ms.
    pub layer_time_bwd_ms: f64,
    /// NIC this device uses for cross-node transfers.
    pub nic_id: usize,
}

/// Per-node link set and NIC count.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub node_id: usize,
    pub vendor: VendorId,
    pub fabric: LinkSpec,
    pub host: LinkSpec,
    pub nic: LinkSpec,
    pub nic_count: usize,
}

/// Validated, immutable cluster description. Safe to share read-only
/// across all rank execution contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTopology {
    /// Sorted by (node_id, device_id); the vector index is the rank.
    devices: Vec<DeviceDescriptor>,
    /// Sorted by node_id.
    nodes: Vec<NodeSpec>,
}

impl ClusterTopology {
    /// Validates and builds a topology from raw parts.
    pub fn new(mut devices: Vec<DeviceDescriptor>, mut nodes: Vec<NodeSpec>) -> Result<Self> {
        if devices.is_empty() {
            return Err(Error::Validation("topology has no devices".into()));
        }
        nodes.sort_by_key(|n| n.node_id);
        devices.sort_by_key(|d| (d.node_id, d.device_id));

        for w in nodes.windows(2) {
            if w[0].node_id == w[1].node_id {
                return Err(Error::Validation(format!(
                    "duplicate node id {}",
                    w[0].node_id
                )));
            }
        }
        for w in devices.windows(2) {
            if w[0].node_id == w[1].node_id && w[0].device_id == w[1].device_id {
                return Err(Error::Validation(format!(
                    "duplicate device ({}, {})",
                    w[0].node_id, w[0].device_id
                )));
            }
        }

        let topo = ClusterTopology { devices, nodes };
        for node in &topo.nodes {
            if node.nic_count == 0 {
                return Err(Error::Validation(format!(
                    "node {} has no NICs",
                    node.node_id
                )));
            }
            if topo.devices_on_node(node.node_id).count() == 0 {
                return Err(Error::Validation(format!(
                    "node {} has no devices",
                    node.node_id
                )));
            }
        }
        for dev in &topo.devices {
            let node = topo
                .nodes
                .iter()
                .find(|n| n.node_id == dev.node_id)
                .ok_or_else(|| {
                    Error::Validation(format!(
                        "device ({}, {}) references unknown node",
                        dev.node_id, dev.device_id
                    ))
                })?;
            // One vendor per node: heterogeneity is modeled at node granularity.
            if dev.vendor != node.vendor {
                return Err(Error::Validation(format!(
                    "node {} mixes vendors {} and {}",
                    dev.node_id, node.vendor, dev.vendor
                )));
            }
            if dev.nic_id >= node.nic_count {
                return Err(Error::Validation(format!(
                    "device ({}, {}) references nic_id {} but node has {} NICs",
                    dev.node_id, dev.device_id, dev.nic_id, node.nic_count
                )));
            }
            if dev.mem_bw_gbps <= 0.0 || dev.host_bw_gbps <= 0.0 {
                return Err(Error::Validation(format!(
                    "device ({}, {}) has non-positive bandwidth",
                    dev.node_id, dev.device_id
                )));
            }
            if dev.layer_time_fwd_ms <= 0.0 || dev.layer_time_bwd_ms <= 0.0 {
                return Err(Error::Validation(format!(
                    "device ({}, {}) has non-positive layer time",
                    dev.node_id, dev.device_id
                )));
            }
        }
        Ok(topo)
    }

    /// Total number of devices, which equals the world size.
    pub fn world_size(&self) -> usize {
        self.devices.len()
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn devices(&self) -> &[DeviceDescriptor] {
        &self.devices
    }

    pub fn devices_on_node(&self, node_id: usize) -> impl Iterator<Item = &DeviceDescriptor> {
        self.devices.iter().filter(move |d| d.node_id == node_id)
    }

    pub fn node(&self, node_id: usize) -> Result<&NodeSpec> {
        self.nodes
            .iter()
            .find(|n| n.node_id == node_id)
            .ok_or_else(|| Error::Validation(format!("unknown node {node_id}")))
    }

    /// Link spec of the given kind on the given node.
    pub fn link(&self, node_id: usize, kind: LinkKind) -> Result<&LinkSpec> {
        let node = self.node(node_id)?;
        Ok(match kind {
            LinkKind::IntraNodeFabric => &node.fabric,
            LinkKind::HostBridge => &node.host,
            LinkKind::NicNetwork => &node.nic,
        })
    }

    /// Device for a rank. Ranks are assigned in `(node_id, device_id)`
    /// lexicographic order, so the mapping is a bijection over
    /// `[0, world_size)`.
    pub fn device_of_rank(&self, rank: usize) -> Result<&DeviceDescriptor> {
        self.devices.get(rank).ok_or(Error::RankOutOfRange {
            rank,
            world_size: self.devices.len(),
        })
    }

    /// Inverse of `device_of_rank`.
    pub fn rank_of_device(&self, node_id: usize, device_id: usize) -> Result<usize> {
        self.devices
            .iter()
            .position(|d| d.node_id == node_id && d.device_id == device_id)
            .ok_or_else(|| Error::Validation(format!("unknown device ({node_id}, {device_id})")))
    }

    pub fn vendor_of_rank(&self, rank: usize) -> Result<&VendorId> {
        Ok(&self.device_of_rank(rank)?.vendor)
    }

    /// True when the two ranks' devices live on different nodes.
    pub fn cross_node(&self, a: usize, b: usize) -> Result<bool> {
        Ok(self.device_of_rank(a)?.node_id != self.device_of_rank(b)?.node_id)
    }

    /// Serializes back to the TOML config format accepted by `load_topology`.
    pub fn to_config_string(&self) -> String {
        let doc = TopologyDoc {
            nodes: self
                .nodes
                .iter()
                .map(|n| {
                    let dev = self
                        .devices_on_node(n.node_id)
                        .next()
                        .expect("validated: every node has a device");
                    NodeDoc {
                        id: n.node_id,
                        vendor: n.vendor.as_str().to_string(),
                        devices: self.devices_on_node(n.node_id).count(),
                        fabric_bw_gbps: n.fabric.bandwidth_gbps,
                        fabric_latency_us: n.fabric.latency_us,
                        host_bw_gbps: n.host.bandwidth_gbps,
                        host_latency_us: Some(n.host.latency_us),
                        nic_count: n.nic_count,
                        nic_bw_gbps: n.nic.bandwidth_gbps,
                        nic_latency_us: n.nic.latency_us,
                        mem_bw_gbps: Some(dev.mem_bw_gbps),
                        layer_time_fwd_ms: Some(dev.layer_time_fwd_ms),
                        layer_time_bwd_ms: Some(dev.layer_time_bwd_ms),
                    }
                })
                .collect(),
        };
        toml::to_string(&doc).expect("topology doc serializes")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TopologyDoc {
    nodes: Vec<NodeDoc>,
}

/// On-disk node record. `mem_bw_gbps`, `host_latency_us` and the layer
/// times are optional and default from the vendor profile (or zero
/// latency for the host bridge).
#[derive(Debug, Serialize, Deserialize)]
struct NodeDoc {
    id: usize,
    vendor: String,
    devices: usize,
    fabric_bw_gbps: f64,
    fabric_latency_us: f64,
    host_bw_gbps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    host_latency_us: Option<f64>,
    nic_count: usize,
    nic_bw_gbps: f64,
    nic_latency_us: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mem_bw_gbps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layer_time_fwd_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layer_time_bwd_ms: Option<f64>,
}

/// Parses and validates a topology document.
///
/// The recognized keys under each `[[nodes]]` table are `id`, `vendor`,
/// `devices`, `fabric_bw_gbps`, `fabric_latency_us`, `host_bw_gbps`,
/// `nic_count`, `nic_bw_gbps`, `nic_latency_us`, `layer_time_fwd_ms`,
/// `layer_time_bwd_ms`, plus optional `mem_bw_gbps` and `host_latency_us`.
///
/// Devices on a node are numbered `0..devices` and assigned NICs
/// round-robin (`device_id % nic_count`); when there are fewer NICs than
/// devices a warning is logged because PP transfers lose strict NIC
/// independence.
pub fn load_topology(config_text: &str) -> Result<ClusterTopology> {
    let doc: TopologyDoc =
        toml::from_str(config_text).map_err(|e| Error::Parse(e.to_string()))?;
    if doc.nodes.is_empty() {
        return Err(Error::Validation("topology lists no nodes".into()));
    }

    let mut nodes = Vec::new();
    let mut devices = Vec::new();
    for n in &doc.nodes {
        let vendor = VendorId::new(n.vendor.clone())?;
        let profile = VendorProfile::for_vendor(vendor.as_str());
        if n.devices == 0 {
            return Err(Error::Validation(format!("node {} has no devices", n.id)));
        }
        if n.nic_count == 0 {
            return Err(Error::Validation(format!("node {} has no NICs", n.id)));
        }
        if n.nic_count < n.devices {
            log::warn!(
                "node {}: {} devices share {} NICs; PP transfers will contend",
                n.id,
                n.devices,
                n.nic_count
            );
        }
        let fabric = LinkSpec::new(LinkKind::IntraNodeFabric, n.fabric_bw_gbps, n.fabric_latency_us)?;
        let host = LinkSpec::new(
            LinkKind::HostBridge,
            n.host_bw_gbps,
            n.host_latency_us.unwrap_or(0.0),
        )?;
        let nic = LinkSpec::new(LinkKind::NicNetwork, n.nic_bw_gbps, n.nic_latency_us)?;
        nodes.push(NodeSpec {
            node_id: n.id,
            vendor: vendor.clone(),
            fabric,
            host,
            nic,
            nic_count: n.nic_count,
        });
        for device_id in 0..n.devices {
            devices.push(DeviceDescriptor {
                device_id,
                node_id: n.id,
                vendor: vendor.clone(),
                mem_bw_gbps: n.mem_bw_gbps.unwrap_or(profile.mem_bw_gbps),
                host_bw_gbps: n.host_bw_gbps,
                layer_time_fwd_ms: n.layer_time_fwd_ms.unwrap_or(profile.layer_time_fwd_ms),
                layer_time_bwd_ms: n.layer_time_bwd_ms.unwrap_or(profile.layer_time_bwd_ms),
                nic_id: device_id % n.nic_count,
            });
        }
    }
    ClusterTopology::new(devices, nodes)
}

/// Builder for synthetic topologies used by the harness and tests.
#[derive(Debug, Clone)]
pub struct NodeBuilder {
    pub vendor: String,
    pub devices: usize,
    pub fabric_bw_gbps: f64,
    pub fabric_latency_us: f64,
    pub host_bw_gbps: f64,
    pub nic_count: usize,
    pub nic_bw_gbps: f64,
    pub nic_latency_us: f64,
    pub mem_bw_gbps: Option<f64>,
    pub layer_time_fwd_ms: Option<f64>,
    pub layer_time_bwd_ms: Option<f64>,
}

impl NodeBuilder {
    /// NVIDIA-class node: 900 GB/s fabric, 64 GB/s host bridge, one
    /// 100 GB/s NIC per device.
    pub fn nvidia(devices: usize) -> Self {
        NodeBuilder {
            vendor: VENDOR_NVIDIA.into(),
            devices,
            fabric_bw_gbps: 900.0,
            fabric_latency_us: 1.0,
            host_bw_gbps: 64.0,
            nic_count: devices,
            nic_bw_gbps: 100.0,
            nic_latency_us: 5.0,
            mem_bw_gbps: None,
            layer_time_fwd_ms: None,
            layer_time_bwd_ms: None,
        }
    }

    /// AMD-class node: 128 GB/s fabric, otherwise the same networking.
    pub fn amd(devices: usize) -> Self {
        NodeBuilder {
            vendor: VENDOR_AMD.into(),
            fabric_bw_gbps: 128.0,
            ..NodeBuilder::nvidia(devices)
        }
    }

    /// Generic vendor node for synthetic multi-vendor tests.
    pub fn custom(vendor: &str, devices: usize) -> Self {
        NodeBuilder {
            vendor: vendor.into(),
            fabric_bw_gbps: 300.0,
            ..NodeBuilder::nvidia(devices)
        }
    }

    pub fn nic_count(mut self, count: usize) -> Self {
        self.nic_count = count;
        self
    }

    pub fn host_bw_gbps(mut self, bw: f64) -> Self {
        self.host_bw_gbps = bw;
        self
    }
}

/// Builds a topology from per-node builders; node ids are assigned in order.
pub fn build_topology(node_builders: &[NodeBuilder]) -> Result<ClusterTopology> {
    let mut nodes = Vec::new();
    let mut devices = Vec::new();
    for (id, b) in node_builders.iter().enumerate() {
        let vendor = VendorId::new(b.vendor.clone())?;
        let profile = VendorProfile::for_vendor(vendor.as_str());
        nodes.push(NodeSpec {
            node_id: id,
            vendor: vendor.clone(),
            fabric: LinkSpec::new(LinkKind::IntraNodeFabric, b.fabric_bw_gbps, b.fabric_latency_us)?,
            host: LinkSpec::new(LinkKind::HostBridge, b.host_bw_gbps, 0.0)?,
            nic: LinkSpec::new(LinkKind::NicNetwork, b.nic_bw_gbps, b.nic_latency_us)?,
            nic_count: b.nic_count,
        });
        for device_id in 0..b.devices {
            devices.push(DeviceDescriptor {
                device_id,
                node_id: id,
                vendor: vendor.clone(),
                mem_bw_gbps: b.mem_bw_gbps.unwrap_or(profile.mem_bw_gbps),
                host_bw_gbps: b.host_bw_gbps,
                layer_time_fwd_ms: b.layer_time_fwd_ms.unwrap_or(profile.layer_time_fwd_ms),
                layer_time_bwd_ms: b.layer_time_bwd_ms.unwrap_or(profile.layer_time_bwd_ms),
                nic_id: device_id % b.nic_count,
            });
        }
    }
    ClusterTopology::new(devices, nodes)
}

/// The reference two-node cluster: 8 NVIDIA-class devices on node 0,
/// 8 AMD-class devices on node 1, 8 NICs per node.
pub fn two_node_hetero() -> ClusterTopology {
    build_topology(&[NodeBuilder::nvidia(8), NodeBuilder::amd(8)])
        .expect("reference topology is valid")
}

/// A single homogeneous node.
pub fn single_node(vendor: &str, devices: usize) -> Result<ClusterTopology> {
    let b = match vendor {
        VENDOR_NVIDIA => NodeBuilder::nvidia(devices),
        VENDOR_AMD => NodeBuilder::amd(devices),
        other => NodeBuilder::custom(other, devices),
    };
    build_topology(&[b])
}

/// Two-node cluster with `per_node` devices of each built-in vendor,
/// NVIDIA-class first. Handy for desk-scale heterogeneous worlds.
pub fn two_node(per_node: usize) -> ClusterTopology {
    build_topology(&[NodeBuilder::nvidia(per_node), NodeBuilder::amd(per_node)])
        .expect("two-node topology is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    const TESTBED: &str = r#"
        [[nodes]]
        id = 0
        vendor = "nvidia"
        devices = 8
        fabric_bw_gbps = 900.0
        fabric_latency_us = 1.0
        host_bw_gbps = 64.0
        nic_count = 8
        nic_bw_gbps = 100.0
        nic_latency_us = 5.0

        [[nodes]]
        id = 1
        vendor = "amd"
        devices = 8
        fabric_bw_gbps = 128.0
        fabric_latency_us = 1.0
        host_bw_gbps = 64.0
        nic_count = 8
        nic_bw_gbps = 100.0
        nic_latency_us = 5.0
    "#;

    #[test]
    fn loads_reference_testbed() {
        let topo = load_topology(TESTBED).unwrap();
        assert_eq!(topo.world_size(), 16);
        assert_eq!(topo.nodes().len(), 2);
        assert_eq!(
            topo.link(0, LinkKind::IntraNodeFabric).unwrap().bandwidth_gbps,
            900.0
        );
        assert_eq!(
            topo.link(1, LinkKind::IntraNodeFabric).unwrap().bandwidth_gbps,
            128.0
        );
        assert_eq!(topo.link(0, LinkKind::NicNetwork).unwrap().bandwidth_gbps, 100.0);
    }

    #[test]
    fn single_device_cluster_is_valid() {
        let cfg = r#"
            [[nodes]]
            id = 0
            vendor = "nvidia"
            devices = 1
            fabric_bw_gbps = 900.0
            fabric_latency_us = 1.0
            host_bw_gbps = 64.0
            nic_count = 1
            nic_bw_gbps = 100.0
            nic_latency_us = 5.0
        "#;
        let topo = load_topology(cfg).unwrap();
        assert_eq!(topo.world_size(), 1);
    }

    #[test]
    fn dangling_nic_rejected() {
        // Construct raw parts with nic_id = 9 on an 8-NIC node.
        let topo = load_topology(TESTBED).unwrap();
        let mut devices = topo.devices().to_vec();
        devices[0].nic_id = 9;
        let err = ClusterTopology::new(devices, topo.nodes().to_vec()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "got {err:?}");
    }

    #[test]
    fn mixed_vendor_node_rejected() {
        let topo = load_topology(TESTBED).unwrap();
        let mut devices = topo.devices().to_vec();
        devices[0].vendor = VendorId::new("amd").unwrap();
        let err = ClusterTopology::new(devices, topo.nodes().to_vec()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn non_positive_bandwidth_rejected() {
        let cfg = TESTBED.replace("nic_bw_gbps = 100.0", "nic_bw_gbps = 0.0");
        assert!(matches!(
            load_topology(&cfg),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn malformed_document_is_parse_error() {
        assert!(matches!(load_topology("nodes = ["), Err(Error::Parse(_))));
    }

    #[test]
    fn rank_mapping_is_lexicographic() {
        let topo = load_topology(TESTBED).unwrap();
        let d0 = topo.device_of_rank(0).unwrap();
        assert_eq!((d0.node_id, d0.device_id), (0, 0));
        // Derived by enumerating (node, device) pairs in order: rank 8 is
        // the first device of node 1.
        let d8 = topo.device_of_rank(8).unwrap();
        assert_eq!((d8.node_id, d8.device_id), (1, 0));
        assert!(matches!(
            topo.device_of_rank(16),
            Err(Error::RankOutOfRange { rank: 16, world_size: 16 })
        ));
    }

    #[test]
    fn rank_mapping_is_bijective() {
        let topo = build_topology(&[
            NodeBuilder::nvidia(3),
            NodeBuilder::amd(5),
            NodeBuilder::custom("v2", 2),
        ])
        .unwrap();
        let mut seen = std::collections::HashSet::new();
        for rank in 0..topo.world_size() {
            let d = topo.device_of_rank(rank).unwrap();
            assert!(seen.insert((d.node_id, d.device_id)));
            assert_eq!(topo.rank_of_device(d.node_id, d.device_id).unwrap(), rank);
        }
        assert_eq!(seen.len(), topo.world_size());
    }

    #[test]
    fn config_round_trip_preserves_structure() {
        let topo = load_topology(TESTBED).unwrap();
        let reloaded = load_topology(&topo.to_config_string()).unwrap();
        assert_eq!(topo, reloaded);

        let synthetic = build_topology(&[
            NodeBuilder::custom("v0", 2).nic_count(1),
            NodeBuilder::amd(4).host_bw_gbps(32.0),
        ])
        .unwrap();
        let reloaded = load_topology(&synthetic.to_config_string()).unwrap();
        assert_eq!(synthetic, reloaded);
    }

    #[test]
    fn node_vendor_homogeneity_holds() {
        let topo = two_node_hetero();
        for node in topo.nodes() {
            let mut vendors = topo.devices_on_node(node.node_id).map(|d| &d.vendor);
            let first = vendors.next().unwrap();
            assert!(vendors.all(|v| v == first));
        }
    }

    #[test]
    fn round_robin_nic_assignment_when_short() {
        let topo = build_topology(&[NodeBuilder::nvidia(8).nic_count(4)]).unwrap();
        for d in topo.devices() {
            assert_eq!(d.nic_id, d.device_id % 4);
        }
    }
}
