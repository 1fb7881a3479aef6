//! Heterogeneous collective composition.
//!
//! Global collectives over vendor-mixed groups run in three strictly
//! sequential phases:
//!
//! 1. every vendor-homogeneous subgroup aggregates with its own CCL;
//! 2. subgroup leaders (lowest rank each) exchange the intermediate
//!    results pairwise over the heterogeneous P2P path and combine them
//!    in ascending subgroup order, so every configuration reduces in the
//!    same order and results are bitwise reproducible;
//! 3. leaders redistribute the global result inside their subgroup with
//!    the vendor CCL.
//!
//! A group with a single subgroup degenerates to the plain vendor
//! collective; phases 2 and 3 are skipped.

use crate::adaptors::{CclAdaptor, CclOp, DeviceAdaptor, DeviceBuffer, Dtype, SimRank, Space};
use crate::bootstrap::GlobalDirectory;
use crate::error::{Error, Result};
use crate::p2p::{dispatch_recv, dispatch_send, CommConfig};

/// A collective group partitioned into vendor-homogeneous subgroups.
/// Subgroups are ordered by their leader (lowest) rank; that order is the
/// phase-2 combine order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeteroGroup {
    members: Vec<usize>,
    subgroups: Vec<Vec<usize>>,
}

impl HeteroGroup {
    /// Partitions `members` by vendor according to the directory.
    pub fn from_directory(members: &[usize], dir: &GlobalDirectory) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyGroup);
        }
        let mut sorted = members.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut by_vendor: Vec<(String, Vec<usize>)> = Vec::new();
        for &m in &sorted {
            let vendor = dir.entry(m)?.vendor.clone();
            match by_vendor.iter_mut().find(|(v, _)| *v == vendor) {
                Some((_, list)) => list.push(m),
                None => by_vendor.push((vendor, vec![m])),
            }
        }
        let mut subgroups: Vec<Vec<usize>> = by_vendor.into_iter().map(|(_, l)| l).collect();
        subgroups.sort_by_key(|s| s[0]);
        Ok(HeteroGroup {
            members: sorted,
            subgroups,
        })
    }

    /// All members, ascending.
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn subgroups(&self) -> &[Vec<usize>] {
        &self.subgroups
    }

    /// One leader per subgroup: its lowest rank.
    pub fn leaders(&self) -> Vec<usize> {
        self.subgroups.iter().map(|s| s[0]).collect()
    }

    pub fn world(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, rank: usize) -> bool {
        self.members.binary_search(&rank).is_ok()
    }

    /// Index of `rank` in the ascending member list.
    pub fn position(&self, rank: usize) -> Result<usize> {
        self.members
            .binary_search(&rank)
            .map_err(|_| Error::Validation(format!("rank {rank} is not in the group")))
    }

    fn subgroup_index_of(&self, rank: usize) -> Result<usize> {
        self.subgroups
            .iter()
            .position(|s| s.contains(&rank))
            .ok_or_else(|| Error::Validation(format!("rank {rank} is not in the group")))
    }
}

fn check_member(r: &SimRank, group: &HeteroGroup) -> Result<()> {
    if !group.contains(r.rank()) {
        return Err(Error::Validation(format!(
            "rank {} called a collective on a group it is not part of",
            r.rank()
        )));
    }
    Ok(())
}

/// Pairwise leader exchange: every leader sends its block to every other
/// leader and receives theirs, pairs processed in lexicographic order
/// with the lower leader sending first. Returns the per-subgroup blocks
/// in subgroup order (with this leader's own block in place).
fn leader_exchange(
    r: &mut SimRank,
    group: &HeteroGroup,
    cfg: &CommConfig,
    my_block: &DeviceBuffer,
    block_len: impl Fn(usize) -> usize,
) -> Result<Vec<Vec<u8>>> {
    let leaders = group.leaders();
    let me = r.rank();
    let my_idx = leaders
        .iter()
        .position(|&l| l == me)
        .expect("caller is a leader");
    let mut blocks: Vec<Option<Vec<u8>>> = vec![None; leaders.len()];
    blocks[my_idx] = Some(my_block.bytes().to_vec());
    for i in 0..leaders.len() {
        for j in (i + 1)..leaders.len() {
            if my_idx == i {
                dispatch_send(r, leaders[j], my_block, cfg)?;
                let (buf, _) = dispatch_recv(r, leaders[j], block_len(j), cfg)?;
                blocks[j] = Some(buf.bytes().to_vec());
                r.free(buf);
            } else if my_idx == j {
                let (buf, _) = dispatch_recv(r, leaders[i], block_len(i), cfg)?;
                blocks[i] = Some(buf.bytes().to_vec());
                r.free(buf);
                dispatch_send(r, leaders[i], my_block, cfg)?;
            }
        }
    }
    Ok(blocks.into_iter().map(|b| b.expect("exchanged")).collect())
}

fn buffer_from_bytes(r: &mut SimRank, bytes: &[u8]) -> Result<DeviceBuffer> {
    let mut out = r.alloc(bytes.len(), Space::Device)?;
    out.bytes_mut().copy_from_slice(bytes);
    Ok(out)
}

/// Global sum over a heterogeneous group; every member ends up with the
/// full reduction. Elementwise reduction order is fixed: ascending rank
/// within each subgroup, then ascending subgroup index.
pub fn hetero_allreduce(
    r: &mut SimRank,
    group: &HeteroGroup,
    input: &DeviceBuffer,
    dtype: Dtype,
    cfg: &CommConfig,
) -> Result<DeviceBuffer> {
    check_member(r, group)?;
    let sub_idx = group.subgroup_index_of(r.rank())?;
    let sub = group.subgroups()[sub_idx].clone();

    let (partial, _) = r.ccl_collective(&sub, CclOp::AllreduceSum, input, dtype)?;
    if group.subgroups().len() == 1 {
        return Ok(partial);
    }

    let leader = sub[0];
    let combined = if r.rank() == leader {
        let blocks = leader_exchange(r, group, cfg, &partial, |_| input.len())?;
        let mut acc = blocks[0].clone();
        for b in &blocks[1..] {
            dtype.sum_into(&mut acc, b)?;
        }
        buffer_from_bytes(r, &acc)?
    } else {
        partial.clone()
    };
    r.free(partial);

    let (result, _) = r.ccl_collective(&sub, CclOp::Broadcast { root: leader }, &combined, dtype)?;
    r.free(combined);
    Ok(result)
}

/// Global allgather: the result on every member is the concatenation of
/// all members' inputs in ascending rank order.
pub fn hetero_allgather(
    r: &mut SimRank,
    group: &HeteroGroup,
    input: &DeviceBuffer,
    cfg: &CommConfig,
) -> Result<DeviceBuffer> {
    check_member(r, group)?;
    let sub_idx = group.subgroup_index_of(r.rank())?;
    let sub = group.subgroups()[sub_idx].clone();
    let n = input.len();

    let (block, _) = r.ccl_collective(&sub, CclOp::Allgather, input, Dtype::I64)?;
    if group.subgroups().len() == 1 {
        return Ok(block);
    }

    let leader = sub[0];
    let assembled = if r.rank() == leader {
        let sizes: Vec<usize> = group.subgroups().iter().map(|s| s.len() * n).collect();
        let blocks = leader_exchange(r, group, cfg, &block, |j| sizes[j])?;
        // Merge subgroup blocks into global ascending-rank order.
        let mut by_rank: Vec<(usize, &[u8])> = Vec::with_capacity(group.world());
        for (si, sg) in group.subgroups().iter().enumerate() {
            for (pos, &rank) in sg.iter().enumerate() {
                by_rank.push((rank, &blocks[si][pos * n..(pos + 1) * n]));
            }
        }
        by_rank.sort_by_key(|&(rank, _)| rank);
        let mut cat = Vec::with_capacity(group.world() * n);
        for (_, chunk) in by_rank {
            cat.extend_from_slice(chunk);
        }
        buffer_from_bytes(r, &cat)?
    } else {
        // Placeholder of the global size for the subgroup broadcast.
        r.alloc(group.world() * n, Space::Device)?
    };
    r.free(block);

    let (result, _) =
        r.ccl_collective(&sub, CclOp::Broadcast { root: leader }, &assembled, Dtype::I64)?;
    r.free(assembled);
    Ok(result)
}

/// Global reduce-scatter: the input splits into `world` equal shards;
/// member `i` (in ascending rank order) receives shard `i` of the global
/// sum.
pub fn hetero_reducescatter(
    r: &mut SimRank,
    group: &HeteroGroup,
    input: &DeviceBuffer,
    dtype: Dtype,
    cfg: &CommConfig,
) -> Result<DeviceBuffer> {
    check_member(r, group)?;
    let world = group.world();
    if input.len() % world != 0 || (input.len() / world) % dtype.width() != 0 {
        return Err(Error::Shape(format!(
            "reduce-scatter input of {} bytes does not split into {world} aligned shards",
            input.len()
        )));
    }
    let sub_idx = group.subgroup_index_of(r.rank())?;
    let sub = group.subgroups()[sub_idx].clone();

    if group.subgroups().len() == 1 {
        let (shard, _) = r.ccl_collective(&sub, CclOp::ReducescatterSum, input, dtype)?;
        return Ok(shard);
    }

    // Partial sums within the subgroup, full vector everywhere.
    let (partial, _) = r.ccl_collective(&sub, CclOp::AllreduceSum, input, dtype)?;
    let leader = sub[0];
    let global = if r.rank() == leader {
        let blocks = leader_exchange(r, group, cfg, &partial, |_| input.len())?;
        let mut acc = blocks[0].clone();
        for b in &blocks[1..] {
            dtype.sum_into(&mut acc, b)?;
        }
        buffer_from_bytes(r, &acc)?
    } else {
        partial.clone()
    };
    r.free(partial);

    let (full, _) = r.ccl_collective(&sub, CclOp::Broadcast { root: leader }, &global, dtype)?;
    r.free(global);

    let shard_len = input.len() / world;
    let pos = group.position(r.rank())?;
    let shard = buffer_from_bytes(r, &full.bytes()[pos * shard_len..(pos + 1) * shard_len])?;
    r.free(full);
    Ok(shard)
}

/// Global broadcast from `root`. Every member calls with an equal-size
/// buffer; the root's content wins. The payload relays root -> root's
/// subgroup leader -> other leaders -> subgroup broadcast.
pub fn hetero_broadcast(
    r: &mut SimRank,
    group: &HeteroGroup,
    root: usize,
    input: &DeviceBuffer,
    cfg: &CommConfig,
) -> Result<DeviceBuffer> {
    check_member(r, group)?;
    if !group.contains(root) {
        return Err(Error::RootNotInGroup { root });
    }
    let me = r.rank();
    let sub_idx = group.subgroup_index_of(me)?;
    let sub = group.subgroups()[sub_idx].clone();

    if group.subgroups().len() == 1 {
        let (out, _) = r.ccl_collective(&sub, CclOp::Broadcast { root }, input, Dtype::I64)?;
        return Ok(out);
    }

    let root_sub = group.subgroup_index_of(root)?;
    let leaders = group.leaders();
    let root_leader = leaders[root_sub];
    let my_leader = sub[0];

    // Hop 1: root hands its payload to its subgroup leader (vendor CCL).
    let mut staged: Option<DeviceBuffer> = None;
    if me == root && me != root_leader {
        r.ccl_send(root_leader, input)?;
    } else if me == root_leader && root != root_leader {
        let (buf, _) = r.ccl_recv(root, input.len())?;
        staged = Some(buf);
    } else if me == root {
        staged = Some(buffer_from_bytes(r, input.bytes())?);
    }

    // Hop 2: root's leader relays to the other leaders, ascending.
    if me == root_leader {
        let payload = staged.take().expect("root leader holds the payload");
        for (i, &l) in leaders.iter().enumerate() {
            if i != root_sub {
                dispatch_send(r, l, &payload, cfg)?;
            }
        }
        staged = Some(payload);
    } else if me == my_leader {
        let (buf, _) = dispatch_recv(r, root_leader, input.len(), cfg)?;
        staged = Some(buf);
    }

    // Hop 3: each subgroup broadcasts from its leader.
    let seed = match staged {
        Some(buf) => buf,
        None => buffer_from_bytes(r, input.bytes())?,
    };
    let (out, _) = r.ccl_collective(&sub, CclOp::Broadcast { root: my_leader }, &seed, Dtype::I64)?;
    r.free(seed);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run_world;
    use crate::topology;
    use crate::wire::{bytes_to_f64s, f64s_to_bytes};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn i64s(vals: &[i64]) -> Vec<u8> {
        vals.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn to_i64s(bytes: &[u8]) -> Vec<i64> {
        bytes
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    fn group_of_world(r: &SimRank) -> HeteroGroup {
        let members: Vec<usize> = (0..r.world_size()).collect();
        HeteroGroup::from_directory(&members, r.directory()).unwrap()
    }

    #[test]
    fn allreduce_two_subgroups_of_two() {
        // Inputs {1,2 | 3,4}: every rank must end with 10.
        let topo = Arc::new(topology::two_node(2));
        let results = run_world(&topo, |mut r| {
            let group = group_of_world(&r);
            let mut buf = r.alloc(8, Space::Device)?;
            buf.bytes_mut()
                .copy_from_slice(&i64s(&[r.rank() as i64 + 1]));
            let out = hetero_allreduce(&mut r, &group, &buf, Dtype::I64, &CommConfig::default())?;
            Ok(to_i64s(out.bytes()))
        })
        .unwrap();
        for vals in results {
            assert_eq!(vals, vec![10]);
        }
    }

    #[test]
    fn single_subgroup_group_degenerates_to_vendor_collective() {
        let topo = Arc::new(topology::single_node("amd", 3).unwrap());
        let results = run_world(&topo, |mut r| {
            let group = group_of_world(&r);
            assert_eq!(group.subgroups().len(), 1);
            let mut buf = r.alloc(8, Space::Device)?;
            buf.bytes_mut().copy_from_slice(&i64s(&[r.rank() as i64]));
            let out = hetero_allreduce(&mut r, &group, &buf, Dtype::I64, &CommConfig::default())?;
            Ok(to_i64s(out.bytes()))
        })
        .unwrap();
        for vals in results {
            assert_eq!(vals, vec![3]); // 0+1+2
        }
    }

    #[test]
    fn allgather_orders_by_rank() {
        let topo = Arc::new(topology::two_node(2));
        let results = run_world(&topo, |mut r| {
            let group = group_of_world(&r);
            let mut buf = r.alloc(8, Space::Device)?;
            buf.bytes_mut().copy_from_slice(&i64s(&[r.rank() as i64]));
            let out = hetero_allgather(&mut r, &group, &buf, &CommConfig::default())?;
            Ok(to_i64s(out.bytes()))
        })
        .unwrap();
        for vals in results {
            assert_eq!(vals, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn reducescatter_all_ones_yields_world_per_shard() {
        let topo = Arc::new(topology::two_node(2));
        let results = run_world(&topo, |mut r| {
            let group = group_of_world(&r);
            let mut buf = r.alloc(32, Space::Device)?;
            buf.bytes_mut().copy_from_slice(&i64s(&[1, 1, 1, 1]));
            let out =
                hetero_reducescatter(&mut r, &group, &buf, Dtype::I64, &CommConfig::default())?;
            Ok(to_i64s(out.bytes()))
        })
        .unwrap();
        for vals in results {
            assert_eq!(vals, vec![4]);
        }
    }

    #[test]
    fn reducescatter_rejects_unaligned_shapes() {
        let topo = Arc::new(topology::two_node(2));
        let results = run_world(&topo, |mut r| {
            let group = group_of_world(&r);
            let buf = r.alloc(24, Space::Device)?; // 3 elements over 4 ranks
            Ok(
                hetero_reducescatter(&mut r, &group, &buf, Dtype::I64, &CommConfig::default())
                    .unwrap_err(),
            )
        })
        .unwrap();
        for e in results {
            assert!(matches!(e, Error::Shape(_)));
        }
    }

    #[test]
    fn broadcast_relays_across_subgroups() {
        // Root 3 (amd, non-leader): payload must reach the nvidia pair.
        let topo = Arc::new(topology::two_node(2));
        let results = run_world(&topo, |mut r| {
            let group = group_of_world(&r);
            let mut buf = r.alloc(16, Space::Device)?;
            if r.rank() == 3 {
                buf.bytes_mut().copy_from_slice(&i64s(&[7, -9]));
            }
            let out = hetero_broadcast(&mut r, &group, 3, &buf, &CommConfig::default())?;
            Ok(to_i64s(out.bytes()))
        })
        .unwrap();
        for vals in results {
            assert_eq!(vals, vec![7, -9]);
        }
    }

    #[test]
    fn broadcast_group_of_one_is_identity() {
        let topo = Arc::new(topology::single_node("nvidia", 1).unwrap());
        run_world(&topo, |mut r| {
            let group = HeteroGroup::from_directory(&[0], r.directory())?;
            let mut buf = r.alloc(8, Space::Device)?;
            buf.bytes_mut().copy_from_slice(&i64s(&[11]));
            let out = hetero_broadcast(&mut r, &group, 0, &buf, &CommConfig::default())?;
            assert_eq!(to_i64s(out.bytes()), vec![11]);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn broadcast_root_must_be_in_group() {
        let topo = Arc::new(topology::two_node(2));
        let results = run_world(&topo, |mut r| {
            if r.rank() > 1 {
                return Ok(None);
            }
            let group = HeteroGroup::from_directory(&[0, 1], r.directory())?;
            let buf = r.alloc(8, Space::Device)?;
            Ok(Some(
                hetero_broadcast(&mut r, &group, 3, &buf, &CommConfig::default()).unwrap_err(),
            ))
        })
        .unwrap();
        for e in results.into_iter().flatten() {
            assert!(matches!(e, Error::RootNotInGroup { root: 3 }));
        }
    }

    #[test]
    fn empty_group_is_rejected() {
        let topo = Arc::new(topology::single_node("nvidia", 1).unwrap());
        run_world(&topo, |r| {
            assert!(matches!(
                HeteroGroup::from_directory(&[], r.directory()),
                Err(Error::EmptyGroup)
            ));
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn three_vendor_allreduce_matches_oracle() {
        let topo = Arc::new(
            topology::build_topology(&[
                topology::NodeBuilder::custom("v0", 2),
                topology::NodeBuilder::custom("v1", 3),
                topology::NodeBuilder::custom("v2", 1),
            ])
            .unwrap(),
        );
        let world = topo.world_size();
        let inputs: Vec<Vec<f64>> = {
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            (0..world)
                .map(|_| (0..24).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .collect()
        };
        let expect: Vec<f64> = {
            // Independent oracle: gather all inputs, reduce ascending.
            let mut acc = inputs[0].clone();
            for row in &inputs[1..] {
                for (a, b) in acc.iter_mut().zip(row) {
                    *a += b;
                }
            }
            acc
        };
        let inputs2 = inputs.clone();
        let results = run_world(&topo, move |mut r| {
            let group = group_of_world(&r);
            let mut buf = r.alloc(24 * 8, Space::Device)?;
            buf.bytes_mut()
                .copy_from_slice(&f64s_to_bytes(&inputs2[r.rank()]));
            let out = hetero_allreduce(&mut r, &group, &buf, Dtype::F64, &CommConfig::default())?;
            Ok(bytes_to_f64s(out.bytes()))
        })
        .unwrap();
        for got in results {
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() <= 1e-12 * e.abs().max(1.0), "{g} vs {e}");
            }
        }
    }

    #[test]
    fn allreduce_is_bitwise_deterministic() {
        let topo = Arc::new(topology::two_node(2));
        let run = || {
            run_world(&topo, |mut r| {
                let group = group_of_world(&r);
                let vals: Vec<f64> = (0..16)
                    .map(|i| ((i + 1) as f64).sqrt() * (r.rank() as f64 - 1.7))
                    .collect();
                let mut buf = r.alloc(128, Space::Device)?;
                buf.bytes_mut().copy_from_slice(&f64s_to_bytes(&vals));
                let out =
                    hetero_allreduce(&mut r, &group, &buf, Dtype::F64, &CommConfig::default())?;
                Ok(out.bytes().to_vec())
            })
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn allreduce_agrees_with_allgather_then_local_reduce() {
        let topo = Arc::new(topology::two_node(2));
        let results = run_world(&topo, |mut r| {
            let group = group_of_world(&r);
            let vals: Vec<f64> = (0..8)
                .map(|i| (i as f64 + 0.25) * (r.rank() as f64 + 1.0))
                .collect();
            let mut buf = r.alloc(64, Space::Device)?;
            buf.bytes_mut().copy_from_slice(&f64s_to_bytes(&vals));
            let cfg = CommConfig::default();
            let ar = hetero_allreduce(&mut r, &group, &buf, Dtype::F64, &cfg)?;
            let ag = hetero_allgather(&mut r, &group, &buf, &cfg)?;
            let gathered = bytes_to_f64s(ag.bytes());
            let mut local = vec![0.0; 8];
            for chunk in gathered.chunks_exact(8) {
                for (a, b) in local.iter_mut().zip(chunk) {
                    *a += b;
                }
            }
            Ok((bytes_to_f64s(ar.bytes()), local))
        })
        .unwrap();
        for (ar, local) in results {
            for (a, l) in ar.iter().zip(&local) {
                assert!((a - l).abs() <= 1e-12 * l.abs().max(1.0));
            }
        }
    }
}
