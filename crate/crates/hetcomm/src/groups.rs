//! Parallel group construction and differentiated backend selection.
//!
//! Ranks form a (tp, dp, pp) grid with tp fastest and pp slowest, so the
//! pp coordinate splits along the node boundary on contiguous node-major
//! rank layouts. Each group gets a backend: vendor-homogeneous groups use
//! the vendor CCL, pipeline groups may span vendors and then use the
//! heterogeneous layer, and a vendor-spanning TP or DP group is a hard
//! error because collectives dominate those groups' traffic and the
//! heterogeneous layer makes no performance promises for them.

use crate::error::{Error, Result};
use crate::topology::ClusterTopology;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupKind {
    Tp,
    Dp,
    Pp,
}

impl std::fmt::Display for GroupKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GroupKind::Tp => f.write_str("TP"),
            GroupKind::Dp => f.write_str("DP"),
            GroupKind::Pp => f.write_str("PP"),
        }
    }
}

/// Communication backend a group is served by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Vendor-native collective library; requires one vendor.
    VendorCcl,
    /// Heterogeneous composition over the cross-vendor P2P path.
    Hetero,
}

/// One parallel group: ordered members plus the backend, once assigned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGroup {
    pub kind: GroupKind,
    pub members: Vec<usize>,
    pub backend: Option<Backend>,
}

/// Grid extents; world size is the product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub tp: usize,
    pub dp: usize,
    pub pp: usize,
}

impl GridDims {
    pub fn world_size(&self) -> usize {
        self.tp * self.dp * self.pp
    }

    /// Rank of grid coordinates: tp fastest, then dp, then pp.
    pub fn rank_of(&self, t: usize, d: usize, p: usize) -> usize {
        t + self.tp * (d + self.dp * p)
    }

    /// Inverse of `rank_of`.
    pub fn coords_of(&self, rank: usize) -> (usize, usize, usize) {
        let t = rank % self.tp;
        let d = (rank / self.tp) % self.dp;
        let p = rank / (self.tp * self.dp);
        (t, d, p)
    }
}

/// All groups of one grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelGroups {
    pub dims: GridDims,
    pub tp: Vec<CommGroup>,
    pub dp: Vec<CommGroup>,
    pub pp: Vec<CommGroup>,
}

impl ParallelGroups {
    /// The PP group containing `rank`.
    pub fn pp_group_of(&self, rank: usize) -> &CommGroup {
        self.pp
            .iter()
            .find(|g| g.members.contains(&rank))
            .expect("groups partition the rank set")
    }

    /// The DP group containing `rank`.
    pub fn dp_group_of(&self, rank: usize) -> &CommGroup {
        self.dp
            .iter()
            .find(|g| g.members.contains(&rank))
            .expect("groups partition the rank set")
    }
}

/// Builds TP/DP/PP groups over the topology's world. Every rank lands in
/// exactly one group of each kind.
pub fn build_groups(
    topology: &ClusterTopology,
    tp: usize,
    pp: usize,
    dp: usize,
) -> Result<ParallelGroups> {
    let dims = GridDims { tp, dp, pp };
    if tp == 0 || dp == 0 || pp == 0 || dims.world_size() != topology.world_size() {
        return Err(Error::GridMismatch {
            tp,
            pp,
            dp,
            world_size: topology.world_size(),
        });
    }

    let mut tp_groups = Vec::with_capacity(dp * pp);
    for p in 0..pp {
        for d in 0..dp {
            tp_groups.push(CommGroup {
                kind: GroupKind::Tp,
                members: (0..tp).map(|t| dims.rank_of(t, d, p)).collect(),
                backend: None,
            });
        }
    }
    let mut dp_groups = Vec::with_capacity(tp * pp);
    for p in 0..pp {
        for t in 0..tp {
            dp_groups.push(CommGroup {
                kind: GroupKind::Dp,
                members: (0..dp).map(|d| dims.rank_of(t, d, p)).collect(),
                backend: None,
            });
        }
    }
    let mut pp_groups = Vec::with_capacity(tp * dp);
    for d in 0..dp {
        for t in 0..tp {
            pp_groups.push(CommGroup {
                kind: GroupKind::Pp,
                members: (0..pp).map(|p| dims.rank_of(t, d, p)).collect(),
                backend: None,
            });
        }
    }
    Ok(ParallelGroups {
        dims,
        tp: tp_groups,
        dp: dp_groups,
        pp: pp_groups,
    })
}

fn group_backend(group: &CommGroup, topology: &ClusterTopology) -> Result<Backend> {
    let first = topology.vendor_of_rank(group.members[0])?;
    let mut homogeneous = true;
    for &m in &group.members {
        if topology.vendor_of_rank(m)? != first {
            homogeneous = false;
            break;
        }
    }
    if homogeneous {
        return Ok(Backend::VendorCcl);
    }
    match group.kind {
        GroupKind::Pp => Ok(Backend::Hetero),
        kind => Err(Error::HeterogeneityNotSupported(format!(
            "{kind} group {:?} spans vendors; only PP groups may",
            group.members
        ))),
    }
}

/// Assigns each group its backend. Vendor-homogeneous groups keep the
/// vendor CCL; vendor-spanning PP groups go heterogeneous; a
/// vendor-spanning TP or DP group fails hard rather than degrade.
pub fn assign_backends(groups: &mut ParallelGroups, topology: &ClusterTopology) -> Result<()> {
    for g in groups
        .tp
        .iter_mut()
        .chain(groups.dp.iter_mut())
        .chain(groups.pp.iter_mut())
    {
        g.backend = Some(group_backend(g, topology)?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology;
    use std::collections::HashSet;

    #[test]
    fn reference_hetero_grid_pairs_across_nodes() {
        // world 16, tp=1, pp=2, dp=8: PP pairs (i, i+8), DP groups 0-7 and
        // 8-15 (derived by enumerating the grid mapping).
        let topo = topology::two_node_hetero();
        let mut groups = build_groups(&topo, 1, 2, 8).unwrap();
        assert_eq!(groups.pp.len(), 8);
        for (i, g) in groups.pp.iter().enumerate() {
            assert_eq!(g.members, vec![i, i + 8]);
        }
        assert_eq!(groups.dp.len(), 2);
        assert_eq!(groups.dp[0].members, (0..8).collect::<Vec<_>>());
        assert_eq!(groups.dp[1].members, (8..16).collect::<Vec<_>>());

        assign_backends(&mut groups, &topo).unwrap();
        for g in &groups.pp {
            assert_eq!(g.backend, Some(Backend::Hetero));
        }
        for g in &groups.dp {
            assert_eq!(g.backend, Some(Backend::VendorCcl));
        }
        for g in &groups.tp {
            assert_eq!(g.backend, Some(Backend::VendorCcl));
        }
    }

    #[test]
    fn homogeneous_single_node_grid_uses_vendor_ccl_everywhere() {
        let topo = topology::single_node("nvidia", 8).unwrap();
        let mut groups = build_groups(&topo, 1, 2, 4).unwrap();
        assign_backends(&mut groups, &topo).unwrap();
        for g in groups.tp.iter().chain(&groups.dp).chain(&groups.pp) {
            assert_eq!(g.backend, Some(Backend::VendorCcl));
        }
    }

    #[test]
    fn indivisible_grid_is_rejected() {
        let topo = topology::single_node("nvidia", 8).unwrap();
        assert!(matches!(
            build_groups(&topo, 3, 1, 1),
            Err(Error::GridMismatch { .. })
        ));
    }

    #[test]
    fn cross_vendor_dp_group_is_a_hard_error() {
        // Two nodes, one device each: dp=2 forces a cross-vendor DP group.
        let topo = topology::two_node(1);
        let mut groups = build_groups(&topo, 1, 1, 2).unwrap();
        let err = assign_backends(&mut groups, &topo).unwrap_err();
        assert!(matches!(err, Error::HeterogeneityNotSupported(_)));

        // The same ranks as a PP group are fine.
        let mut groups = build_groups(&topo, 1, 2, 1).unwrap();
        assign_backends(&mut groups, &topo).unwrap();
        assert_eq!(groups.pp[0].backend, Some(Backend::Hetero));
    }

    #[test]
    fn each_kind_partitions_the_rank_set() {
        let topo = topology::two_node_hetero();
        for (tp, pp, dp) in [(1, 2, 8), (2, 2, 4), (4, 2, 2), (1, 4, 4), (2, 4, 2)] {
            let groups = build_groups(&topo, tp, pp, dp).unwrap();
            for list in [&groups.tp, &groups.dp, &groups.pp] {
                let mut seen = HashSet::new();
                for g in list {
                    for &m in &g.members {
                        assert!(seen.insert(m), "rank {m} in two groups");
                    }
                }
                assert_eq!(seen.len(), topo.world_size());
            }
        }
    }

    #[test]
    fn grid_round_trip_is_identity() {
        let dims = GridDims { tp: 3, dp: 4, pp: 5 };
        for rank in 0..dims.world_size() {
            let (t, d, p) = dims.coords_of(rank);
            assert_eq!(dims.rank_of(t, d, p), rank);
            assert!(t < 3 && d < 4 && p < 5);
        }
    }
}
