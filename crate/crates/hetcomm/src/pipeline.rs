//! Pipeline-parallel iteration simulator and layer-partition optimizer.
//!
//! [`simulate_iteration`] plays one training iteration of a 1F1B
//! (one-forward-one-backward, non-interleaved) schedule over per-stage
//! compute profiles and a communication cost model, producing the
//! iteration time and a validated event trace. Activation and gradient
//! transfers block the sending stage for their full cost and the
//! receiving stage until arrival, matching the blocking point-to-point
//! semantics of the communication layer.
//!
//! [`optimize_partition`] searches layer splits for the plan minimizing
//! simulated iteration time. Uneven splits matter when stages sit on
//! devices with different per-layer speed: the slower device should hold
//! fewer layers, and a bad split can make a mixed pipeline slower than
//! the slowest homogeneous one.

use serde::Deserialize;

use crate::adaptors::{ring_collective_cost_us, CclOp};
use crate::error::{Error, Result};
use crate::p2p::{nic_link_between, path_time_us, CommConfig};
use crate::topology::{ClusterTopology, LinkKind};
use crate::transport::wire_time_us;

// ---------------------------------------------------------------------------
// Plans and profiles
// ---------------------------------------------------------------------------

/// Layers assigned to each pipeline stage, every stage non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    layers_per_stage: Vec<usize>,
}

impl PartitionPlan {
    pub fn new(layers_per_stage: Vec<usize>) -> Result<Self> {
        if layers_per_stage.is_empty() {
            return Err(Error::InvalidPlan("no stages".into()));
        }
        if layers_per_stage.iter().any(|&l| l == 0) {
            return Err(Error::InvalidPlan(format!(
                "every stage needs at least one layer, got {layers_per_stage:?}"
            )));
        }
        Ok(PartitionPlan { layers_per_stage })
    }

    pub fn layers_per_stage(&self) -> &[usize] {
        &self.layers_per_stage
    }

    pub fn stages(&self) -> usize {
        self.layers_per_stage.len()
    }

    pub fn total_layers(&self) -> usize {
        self.layers_per_stage.iter().sum()
    }

    /// Spread between the heaviest and lightest stage, the tie-break
    /// metric favoring even splits.
    pub fn spread(&self) -> usize {
        let max = *self.layers_per_stage.iter().max().unwrap();
        let min = *self.layers_per_stage.iter().min().unwrap();
        max - min
    }
}

impl std::fmt::Display for PartitionPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.layers_per_stage.iter().map(|l| l.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl std::str::FromStr for PartitionPlan {
    type Err = Error;

    /// Parses "15,17"-style plans.
    fn from_str(s: &str) -> Result<Self> {
        let layers: Vec<usize> = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("bad plan entry '{p}': {e}")))
            })
            .collect::<Result<_>>()?;
        PartitionPlan::new(layers)
    }
}

/// Per-stage calibration: how long one layer takes on that stage's
/// device, plus a fixed per-microbatch overhead for work outside the
/// transformer stack (embeddings, heads), default zero.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct StageSpec {
    pub vendor: String,
    pub layer_time_fwd_ms: f64,
    pub layer_time_bwd_ms: f64,
    #[serde(default)]
    pub fixed_fwd_ms: f64,
    #[serde(default)]
    pub fixed_bwd_ms: f64,
}

impl StageSpec {
    pub fn new(vendor: &str, fwd_ms: f64, bwd_ms: f64) -> Self {
        StageSpec {
            vendor: vendor.to_string(),
            layer_time_fwd_ms: fwd_ms,
            layer_time_bwd_ms: bwd_ms,
            fixed_fwd_ms: 0.0,
            fixed_bwd_ms: 0.0,
        }
    }
}

fn default_microbatches() -> usize {
    8
}

/// Default inter-stage message: hidden 4096 x sequence 4096 x 1
/// microbatch at 2 bytes per element.
pub const DEFAULT_ACTIVATION_BYTES: u64 = 4096 * 4096 * 2;

fn default_activation_bytes() -> u64 {
    DEFAULT_ACTIVATION_BYTES
}

fn default_gradient_bytes() -> u64 {
    DEFAULT_ACTIVATION_BYTES
}

fn default_dp() -> usize {
    1
}

/// Compute and traffic calibration for a pipeline.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct StageProfile {
    pub stages: Vec<StageSpec>,
    #[serde(default = "default_microbatches")]
    pub microbatches: usize,
    #[serde(default = "default_activation_bytes")]
    pub activation_bytes: u64,
    /// Per-replica gradient volume for the data-parallel allreduce.
    #[serde(default = "default_gradient_bytes")]
    pub gradient_bytes: u64,
    /// Data-parallel replica count used by `throughput`.
    #[serde(default = "default_dp")]
    pub dp: usize,
}

impl StageProfile {
    pub fn uniform(pp: usize, vendor: &str, fwd_ms: f64, bwd_ms: f64) -> Self {
        StageProfile {
            stages: (0..pp).map(|_| StageSpec::new(vendor, fwd_ms, bwd_ms)).collect(),
            microbatches: default_microbatches(),
            activation_bytes: DEFAULT_ACTIVATION_BYTES,
            gradient_bytes: DEFAULT_ACTIVATION_BYTES,
            dp: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Validation("profile has no stages".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.layer_time_fwd_ms <= 0.0 || s.layer_time_bwd_ms <= 0.0 {
                return Err(Error::Validation(format!(
                    "stage {i} has non-positive layer times"
                )));
            }
            if s.fixed_fwd_ms < 0.0 || s.fixed_bwd_ms < 0.0 {
                return Err(Error::Validation(format!(
                    "stage {i} has negative fixed overhead"
                )));
            }
        }
        if self.microbatches == 0 {
            return Err(Error::Validation("microbatches must be >= 1".into()));
        }
        Ok(())
    }

    fn fwd_ms(&self, stage: usize, layers: usize) -> f64 {
        let s = &self.stages[stage];
        layers as f64 * s.layer_time_fwd_ms + s.fixed_fwd_ms
    }

    fn bwd_ms(&self, stage: usize, layers: usize) -> f64 {
        let s = &self.stages[stage];
        layers as f64 * s.layer_time_bwd_ms + s.fixed_bwd_ms
    }
}

/// Parses the TOML profile format used by the CLI (`[[stages]]` tables
/// plus optional `microbatches`, `activation_bytes`, `gradient_bytes`,
/// `dp`).
pub fn load_profile(text: &str) -> Result<StageProfile> {
    let profile: StageProfile =
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    profile.validate()?;
    Ok(profile)
}

// ---------------------------------------------------------------------------
// Communication models
// ---------------------------------------------------------------------------

/// Inter-stage and data-parallel communication costs in milliseconds.
pub trait CommModel {
    /// Cost of moving `bytes` between adjacent stages.
    fn p2p_ms(&self, from_stage: usize, to_stage: usize, bytes: u64) -> f64;

    /// Cost of the per-iteration data-parallel gradient allreduce.
    fn dp_allreduce_ms(&self, bytes: u64) -> f64;
}

/// No communication cost; isolates compute effects.
pub struct ZeroComm;

impl CommModel for ZeroComm {
    fn p2p_ms(&self, _: usize, _: usize, _: u64) -> f64 {
        0.0
    }

    fn dp_allreduce_ms(&self, _: u64) -> f64 {
        0.0
    }
}

/// Fixed per-hop cost, handy for experiments.
pub struct ConstComm {
    pub p2p_ms: f64,
    pub allreduce_ms: f64,
}

impl CommModel for ConstComm {
    fn p2p_ms(&self, _: usize, _: usize, _: u64) -> f64 {
        self.p2p_ms
    }

    fn dp_allreduce_ms(&self, _: u64) -> f64 {
        self.allreduce_ms
    }
}

/// Costs derived from a topology: each stage is represented by one rank;
/// cross-vendor hops price the configured heterogeneous path, same-vendor
/// hops the vendor transport, and the gradient allreduce prices a ring
/// over each stage's node fabric (the slowest stage bounds the cost).
pub struct TopologyComm<'a> {
    pub topology: &'a ClusterTopology,
    pub stage_ranks: Vec<usize>,
    pub comm: CommConfig,
    pub dp: usize,
}

impl CommModel for TopologyComm<'_> {
    fn p2p_ms(&self, from_stage: usize, to_stage: usize, bytes: u64) -> f64 {
        let a = self.stage_ranks[from_stage];
        let b = self.stage_ranks[to_stage];
        let same_vendor = match (
            self.topology.device_of_rank(a),
            self.topology.device_of_rank(b),
        ) {
            (Ok(da), Ok(db)) => da.vendor == db.vendor,
            _ => false,
        };
        let us = if same_vendor {
            let link = if self.topology.cross_node(a, b).unwrap_or(true) {
                nic_link_between(self.topology, a, b).expect("links validated")
            } else {
                *self
                    .topology
                    .link(
                        self.topology.device_of_rank(a).expect("rank").node_id,
                        LinkKind::IntraNodeFabric,
                    )
                    .expect("links validated")
            };
            wire_time_us(&link, bytes)
        } else {
            path_time_us(
                self.topology,
                a,
                b,
                bytes as usize,
                self.comm.path,
                &self.comm.chunk,
            )
            .expect("ranks validated")
        };
        us / 1e3
    }

    fn dp_allreduce_ms(&self, bytes: u64) -> f64 {
        if self.dp <= 1 {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for &rank in &self.stage_ranks {
            let node = self.topology.device_of_rank(rank).expect("rank").node_id;
            let link = self
                .topology
                .link(node, LinkKind::IntraNodeFabric)
                .expect("links validated");
            worst = worst.max(ring_collective_cost_us(
                CclOp::AllreduceSum,
                self.dp,
                bytes,
                link,
            ));
        }
        worst / 1e3
    }
}

// ---------------------------------------------------------------------------
// Schedule simulation
// ---------------------------------------------------------------------------

/// Pipeline schedule; only non-interleaved 1F1B is modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    OneFOneB,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1f1b" | "1F1B" => Ok(Schedule::OneFOneB),
            other => Err(Error::Spec(format!("unknown schedule '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Fwd,
    Bwd,
    Send,
    Recv,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Fwd => f.write_str("fwd"),
            Phase::Bwd => f.write_str("bwd"),
            Phase::Send => f.write_str("send"),
            Phase::Recv => f.write_str("recv"),
        }
    }
}

/// One timed event of a simulated iteration. Send/recv events carry the
/// peer stage; compute events do not.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEvent {
    pub stage: usize,
    pub microbatch: usize,
    pub phase: Phase,
    pub peer: Option<usize>,
    pub t_start_ms: f64,
    pub t_end_ms: f64,
}

/// Event log of one iteration; validated on every simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTrace {
    pub stages: usize,
    pub events: Vec<TraceEvent>,
}

impl ScheduleTrace {
    /// Structural checks: per-stage events never overlap, and every
    /// receive finishes no earlier than the matching send.
    pub fn validate(&self) -> Result<()> {
        for s in 0..self.stages {
            let mut evs: Vec<&TraceEvent> = self.events.iter().filter(|e| e.stage == s).collect();
            evs.sort_by(|a, b| a.t_start_ms.partial_cmp(&b.t_start_ms).unwrap());
            for w in evs.windows(2) {
                if w[1].t_start_ms < w[0].t_end_ms - 1e-9 {
                    return Err(Error::Validation(format!(
                        "stage {s} events overlap: {:?} then {:?}",
                        w[0], w[1]
                    )));
                }
            }
        }
        for recv in self.events.iter().filter(|e| e.phase == Phase::Recv) {
            let matching = self.events.iter().find(|e| {
                e.phase == Phase::Send
                    && e.stage == recv.peer.unwrap()
                    && e.peer == Some(recv.stage)
                    && e.microbatch == recv.microbatch
                    && e.t_end_ms <= recv.t_end_ms + 1e-9
            });
            if matching.is_none() {
                return Err(Error::Validation(format!(
                    "recv without earlier matching send: {recv:?}"
                )));
            }
        }
        Ok(())
    }

    /// Renders the trace in the transfer-trace CSV schema; times convert
    /// to microseconds, compute events carry zero bytes, and the phase
    /// lands in the segment column.
    pub fn to_csv(&self, activation_bytes: u64) -> String {
        let mut out = String::from(crate::transport::TRACE_CSV_HEADER);
        out.push('\n');
        for e in &self.events {
            let (src, dst) = match e.phase {
                Phase::Send => (e.stage, e.peer.unwrap_or(e.stage)),
                Phase::Recv => (e.peer.unwrap_or(e.stage), e.stage),
                _ => (e.stage, e.stage),
            };
            let bytes = match e.phase {
                Phase::Send | Phase::Recv => activation_bytes,
                _ => 0,
            };
            out.push_str(&format!(
                "{},{},{},{},pipeline,{},{}\n",
                e.t_start_ms * 1e3,
                e.t_end_ms * 1e3,
                src,
                dst,
                bytes,
                e.phase
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    RecvAct(usize),
    Fwd(usize),
    SendAct(usize),
    RecvGrad(usize),
    Bwd(usize),
    SendGrad(usize),
}

/// Per-stage 1F1B action queue. Warmup holds `min(pp - stage, m)`
/// forwards, steady state alternates forward/backward, cooldown drains
/// the remaining backwards.
fn stage_actions(stage: usize, pp: usize, m: usize) -> Vec<Action> {
    let warmup = (pp - stage).min(m);
    let mut q = Vec::new();
    let push_fwd = |q: &mut Vec<Action>, mb: usize| {
        if stage > 0 {
            q.push(Action::RecvAct(mb));
        }
        q.push(Action::Fwd(mb));
        if stage + 1 < pp {
            q.push(Action::SendAct(mb));
        }
    };
    let push_bwd = |q: &mut Vec<Action>, mb: usize| {
        if stage + 1 < pp {
            q.push(Action::RecvGrad(mb));
        }
        q.push(Action::Bwd(mb));
        if stage > 0 {
            q.push(Action::SendGrad(mb));
        }
    };
    for mb in 0..warmup {
        push_fwd(&mut q, mb);
    }
    for k in 0..(m - warmup) {
        push_fwd(&mut q, warmup + k);
        push_bwd(&mut q, k);
    }
    for mb in (m - warmup)..m {
        push_bwd(&mut q, mb);
    }
    q
}

/// Simulates one 1F1B iteration. Returns the iteration time in
/// milliseconds (the latest event end) and the validated trace.
pub fn simulate_iteration(
    plan: &PartitionPlan,
    profile: &StageProfile,
    comm: &dyn CommModel,
    _schedule: Schedule,
) -> Result<(f64, ScheduleTrace)> {
    profile.validate()?;
    let pp = profile.stages.len();
    if plan.stages() != pp {
        return Err(Error::InvalidPlan(format!(
            "plan has {} stages, profile {}",
            plan.stages(),
            pp
        )));
    }
    let m = profile.microbatches;
    if m < pp {
        log::warn!("microbatches ({m}) < stages ({pp}); the pipeline will mostly sit in bubbles");
    }

    let layers = plan.layers_per_stage();
    let queues: Vec<Vec<Action>> = (0..pp).map(|s| stage_actions(s, pp, m)).collect();
    let mut next: Vec<usize> = vec![0; pp];
    let mut cursor: Vec<f64> = vec![0.0; pp];
    // Arrival time of (to_stage, microbatch, is_grad).
    let mut arrivals: std::collections::HashMap<(usize, usize, bool), f64> =
        std::collections::HashMap::new();
    let mut events = Vec::new();

    loop {
        let mut progressed = false;
        let mut done = true;
        for s in 0..pp {
            while next[s] < queues[s].len() {
                let action = queues[s][next[s]];
                let ready = match action {
                    Action::RecvAct(mb) => arrivals.get(&(s, mb, false)).copied(),
                    Action::RecvGrad(mb) => arrivals.get(&(s, mb, true)).copied(),
                    _ => Some(0.0),
                };
                let Some(arrival) = ready else { break };
                let start = cursor[s];
                let (end, ev) = match action {
                    Action::Fwd(mb) => {
                        let end = start + profile.fwd_ms(s, layers[s]);
                        (end, TraceEvent { stage: s, microbatch: mb, phase: Phase::Fwd, peer: None, t_start_ms: start, t_end_ms: end })
                    }
                    Action::Bwd(mb) => {
                        let end = start + profile.bwd_ms(s, layers[s]);
                        (end, TraceEvent { stage: s, microbatch: mb, phase: Phase::Bwd, peer: None, t_start_ms: start, t_end_ms: end })
                    }
                    Action::SendAct(mb) => {
                        let end = start + comm.p2p_ms(s, s + 1, profile.activation_bytes);
                        arrivals.insert((s + 1, mb, false), end);
                        (end, TraceEvent { stage: s, microbatch: mb, phase: Phase::Send, peer: Some(s + 1), t_start_ms: start, t_end_ms: end })
                    }
                    Action::SendGrad(mb) => {
                        let end = start + comm.p2p_ms(s, s - 1, profile.activation_bytes);
                        arrivals.insert((s - 1, mb, true), end);
                        (end, TraceEvent { stage: s, microbatch: mb, phase: Phase::Send, peer: Some(s - 1), t_start_ms: start, t_end_ms: end })
                    }
                    Action::RecvAct(mb) => {
                        let end = start.max(arrival);
                        (end, TraceEvent { stage: s, microbatch: mb, phase: Phase::Recv, peer: Some(s - 1), t_start_ms: start, t_end_ms: end })
                    }
                    Action::RecvGrad(mb) => {
                        let end = start.max(arrival);
                        (end, TraceEvent { stage: s, microbatch: mb, phase: Phase::Recv, peer: Some(s + 1), t_start_ms: start, t_end_ms: end })
                    }
                };
                events.push(ev);
                cursor[s] = end;
                next[s] += 1;
                progressed = true;
            }
            done &= next[s] == queues[s].len();
        }
        if done {
            break;
        }
        if !progressed {
            return Err(Error::InvalidPlan(
                "schedule deadlocked; this is a bug in the action queues".into(),
            ));
        }
    }

    let iteration_ms = cursor.iter().cloned().fold(0.0, f64::max);
    let trace = ScheduleTrace { stages: pp, events };
    trace.validate()?;
    Ok((iteration_ms, trace))
}

// ---------------------------------------------------------------------------
// Partition optimizer
// ---------------------------------------------------------------------------

fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    // All ways to write `total` as `parts` positive integers, ordered.
    let mut out = Vec::new();
    let mut current = vec![0; parts];
    fn rec(total: usize, idx: usize, parts: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if idx == parts - 1 {
            current[idx] = total;
            out.push(current.clone());
            return;
        }
        let remaining_parts = parts - idx - 1;
        for v in 1..=(total - remaining_parts) {
            current[idx] = v;
            rec(total - v, idx + 1, parts, current, out);
        }
    }
    rec(total, 0, parts, &mut current, &mut out);
    out
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

/// Candidate plans ranked by (iteration time, spread, layers). The best
/// plan of an exhaustive enumeration is the optimum; large search spaces
/// fall back to coordinate descent from the proportional split.
pub fn optimize_partition(
    total_layers: usize,
    profile: &StageProfile,
    comm: &dyn CommModel,
    schedule: Schedule,
) -> Result<PartitionPlan> {
    profile.validate()?;
    let pp = profile.stages.len();
    if total_layers < pp {
        return Err(Error::Infeasible(format!(
            "{total_layers} layers cannot fill {pp} stages"
        )));
    }
    if pp == 1 {
        return PartitionPlan::new(vec![total_layers]);
    }

    let evaluate = |layers: &[usize]| -> Result<f64> {
        let plan = PartitionPlan::new(layers.to_vec())?;
        Ok(simulate_iteration(&plan, profile, comm, schedule)?.0)
    };
    let better = |time: f64, layers: &[usize], best: &(f64, Vec<usize>)| -> bool {
        let (bt, bl) = best;
        let spread = |l: &[usize]| l.iter().max().unwrap() - l.iter().min().unwrap();
        (time, spread(layers), layers) < (*bt, spread(bl), bl.as_slice())
    };

    const EXHAUSTIVE_LIMIT: usize = 200_000;
    if binomial(total_layers - 1, pp - 1) <= EXHAUSTIVE_LIMIT {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for layers in compositions(total_layers, pp) {
            let time = evaluate(&layers)?;
            if best.as_ref().map_or(true, |b| better(time, &layers, b)) {
                best = Some((time, layers));
            }
        }
        let (_, layers) = best.expect("at least one composition");
        return PartitionPlan::new(layers);
    }

    // Bounded sweep: proportional-to-speed start, then move single layers
    // between stage pairs while it helps.
    let speed: Vec<f64> = profile
        .stages
        .iter()
        .map(|s| 1.0 / (s.layer_time_fwd_ms + s.layer_time_bwd_ms))
        .collect();
    let speed_sum: f64 = speed.iter().sum();
    let mut layers: Vec<usize> = speed
        .iter()
        .map(|&v| ((total_layers as f64 * v / speed_sum).round() as usize).max(1))
        .collect();
    // Repair rounding drift.
    while layers.iter().sum::<usize>() > total_layers {
        let i = (0..pp).max_by_key(|&i| layers[i]).unwrap();
        layers[i] -= 1;
    }
    while layers.iter().sum::<usize>() < total_layers {
        let i = (0..pp).min_by_key(|&i| layers[i]).unwrap();
        layers[i] += 1;
    }
    let mut best = (evaluate(&layers)?, layers);
    loop {
        let mut improved = false;
        for from in 0..pp {
            for to in 0..pp {
                if from == to || best.1[from] <= 1 {
                    continue;
                }
                let mut cand = best.1.clone();
                cand[from] -= 1;
                cand[to] += 1;
                let time = evaluate(&cand)?;
                if better(time, &cand, &best) {
                    best = (time, cand);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    PartitionPlan::new(best.1)
}

/// Samples per second of a data-parallel pipeline: `global_batch`
/// samples per iteration over the simulated iteration time plus one
/// gradient allreduce.
pub fn throughput(
    plan: &PartitionPlan,
    profile: &StageProfile,
    comm: &dyn CommModel,
    global_batch: usize,
) -> Result<f64> {
    let (iter_ms, _) = simulate_iteration(plan, profile, comm, Schedule::OneFOneB)?;
    let total_ms = iter_ms + comm.dp_allreduce_ms(profile.gradient_bytes);
    Ok(global_batch as f64 / (total_ms / 1e3))
}
