//! Boundary communicators.
//!
//! A [`BridgePlan`] is compiled once per edge from the two module layouts.
//! Both sides derive the identical plan. It records, for every destination
//! DP shard, the ordered source intervals that form it. Backward uses exactly
//! the same records in reverse.
//!
//! Two transports realize a plan:
//!
//! * leader-routed: source and destination leaders (canonical TP/CP
//!   coordinates) exchange interval slices point-to-point and a local
//!   broadcast materializes the result on the non-leader ranks. Used for
//!   disjoint rank sets, and for shared rank sets whose coordinates do not
//!   line up (see below).
//! * shared-rank: source and destination grids cover the same ranks and every
//!   rank already holds source data belonging to its destination shard. Equal
//!   DP is rank-local. Fan-in all-gathers groups of `k` ranks. Fan-out selects
//!   an interval, and its backward all-gathers the `k` sibling gradients.
//!
//! Destination results are replicated on every TP/CP rank of a destination
//! shard. On the way back only the leader's gradient is routed; callers must
//! make replica gradients identical first.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::rc::Rc;

use thiserror::Error;

use crate::grid::{partition_batch, placement_of_edge, BatchInterval, BoundaryEdge, GridError, Placement, Rank};
use crate::simnet::{Comm, Fabric, RankScript, SimError, Tag, ELEMENT_BYTES};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BridgeError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("dp {src} -> {dst}: neither DP degree divides the other")]
    NonIntegerFan { src: usize, dst: usize },
    #[error("plan infeasible: {0}")]
    PlanInfeasible(String),
    #[error("rank {rank}: shard covers {got} but the plan expects {expected}")]
    ShardIntervalMismatch { rank: Rank, expected: String, got: String },
    #[error("source rank {rank} did not supply its shard")]
    MissingSourceShard { rank: Rank },
    #[error("rank {rank}: gradient covers {got} but the forward produced {expected}")]
    GradIntervalMismatch { rank: Rank, expected: String, got: String },
    #[error("destination leader {rank} did not supply a gradient")]
    MissingGradShard { rank: Rank },
    #[error("edge {edge}: no forward record for microbatch {mb}")]
    UnknownMicrobatch { edge: String, mb: usize },
    #[error("edge {edge}: microbatch {mb} was already forwarded")]
    DuplicateMicrobatch { edge: String, mb: usize },
    #[error("rank {rank} does not take part in edge {edge}")]
    NotAParticipant { rank: Rank, edge: String },
    #[error("payload of {got} elements does not match {rows} rows x {width}")]
    PayloadShape { rows: usize, width: usize, got: usize },
    #[error("replicas of destination shard {shard} hold different gradients")]
    ReplicaDivergence { shard: usize },
}

/// How DP shards on the two sides of an edge relate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpRelation {
    Equal,
    /// `DP_src = k * DP_dst`.
    FanIn(usize),
    /// `DP_dst = k * DP_src`.
    FanOut(usize),
}

impl DpRelation {
    pub fn factor(&self) -> usize {
        match *self {
            DpRelation::Equal => 1,
            DpRelation::FanIn(k) | DpRelation::FanOut(k) => k,
        }
    }
}

impl fmt::Display for DpRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DpRelation::Equal => f.write_str("equal"),
            DpRelation::FanIn(k) => write!(f, "fan-in({k})"),
            DpRelation::FanOut(k) => write!(f, "fan-out({k})"),
        }
    }
}

pub fn classify_dp_relation(edge: &BoundaryEdge) -> Result<DpRelation, BridgeError> {
    let (src, dst) = (edge.source.dp, edge.dest.dp);
    if src == dst {
        Ok(DpRelation::Equal)
    } else if src > dst && src % dst == 0 {
        Ok(DpRelation::FanIn(src / dst))
    } else if dst > src && dst % src == 0 {
        Ok(DpRelation::FanOut(dst / src))
    } else {
        Err(BridgeError::NonIntegerFan { src, dst })
    }
}

/// A rank-local batch shard: `interval.len` rows of `feature_width` values.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedTensor {
    pub interval: BatchInterval,
    pub feature_width: usize,
    pub payload: Vec<f64>,
}

impl ShardedTensor {
    pub fn new(interval: BatchInterval, feature_width: usize, payload: Vec<f64>) -> Result<Self, BridgeError> {
        if payload.len() != interval.len * feature_width {
            return Err(BridgeError::PayloadShape {
                rows: interval.len,
                width: feature_width,
                got: payload.len(),
            });
        }
        Ok(Self {
            interval,
            feature_width,
            payload,
        })
    }

    /// Rows of the global samples in `sub`, which must lie inside this shard.
    pub fn rows(&self, sub: BatchInterval) -> Vec<f64> {
        assert!(self.interval.contains(&sub), "{sub} outside {}", self.interval);
        let lo = (sub.start - self.interval.start) * self.feature_width;
        self.payload[lo..lo + sub.len * self.feature_width].to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceShard {
    pub dp: usize,
    pub interval: BatchInterval,
    pub leader: Rank,
    /// Every rank of the source's last stage holding this shard.
    pub holders: Vec<Rank>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DestShard {
    pub dp: usize,
    pub interval: BatchInterval,
    pub leader: Rank,
    /// Every rank of the destination's first stage that receives this shard.
    pub members: Vec<Rank>,
}

/// One leader-to-leader route; backward traverses it in reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    pub src_shard: usize,
    pub dst_shard: usize,
    pub src_leader: Rank,
    pub dst_leader: Rank,
    pub interval: BatchInterval,
}

/// Per-rank step of the shared-rank transport.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankAction {
    RankLocal,
    AllGather {
        group: Vec<Rank>,
        own: BatchInterval,
    },
    IntervalSelect {
        parent: BatchInterval,
        interval: BatchInterval,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    LeaderRouted,
    SharedRank {
        forward: BTreeMap<Rank, RankAction>,
        backward: BTreeMap<Rank, RankAction>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgePlan {
    pub edge: BoundaryEdge,
    pub placement: Placement,
    pub relation: DpRelation,
    pub sources: Vec<SourceShard>,
    pub dests: Vec<DestShard>,
    /// Ordered by destination shard, then by batch position.
    pub transfers: Vec<Transfer>,
    pub transport: Transport,
}

pub fn plan_bridge(edge: &BoundaryEdge) -> Result<BridgePlan, BridgeError> {
    let placement = placement_of_edge(edge).map_err(|e| match e {
        GridError::PartialOverlap { .. } => BridgeError::PlanInfeasible(e.to_string()),
        other => BridgeError::Grid(other),
    })?;
    let relation = classify_dp_relation(edge)?;
    let (src, dst) = (&edge.source, &edge.dest);
    let src_parts = partition_batch(edge.global_batch, src.dp)?;
    let dst_parts = partition_batch(edge.global_batch, dst.dp)?;
    let last = src.pp - 1;

    let sources = src_parts
        .iter()
        .enumerate()
        .map(|(dp, &interval)| {
            Ok(SourceShard {
                dp,
                interval,
                leader: src.leader_rank(last, dp)?,
                holders: src.shard_ranks(last, dp)?,
            })
        })
        .collect::<Result<Vec<_>, GridError>>()?;
    let dests = dst_parts
        .iter()
        .enumerate()
        .map(|(dp, &interval)| {
            Ok(DestShard {
                dp,
                interval,
                leader: dst.leader_rank(0, dp)?,
                members: dst.shard_ranks(0, dp)?,
            })
        })
        .collect::<Result<Vec<_>, GridError>>()?;

    let mut transfers = Vec::new();
    for d in &dests {
        for s in &sources {
            if let Some(interval) = s.interval.intersect(&d.interval) {
                transfers.push(Transfer {
                    src_shard: s.dp,
                    dst_shard: d.dp,
                    src_leader: s.leader,
                    dst_leader: d.leader,
                    interval,
                });
            }
        }
    }

    let transport = match placement {
        Placement::NonColocated => Transport::LeaderRouted,
        Placement::Colocated => shared_rank_actions(relation, &sources, &dests)
            .map(|(forward, backward)| Transport::SharedRank { forward, backward })
            .unwrap_or(Transport::LeaderRouted),
    };

    Ok(BridgePlan {
        edge: edge.clone(),
        placement,
        relation,
        sources,
        dests,
        transfers,
        transport,
    })
}

type ActionMap = BTreeMap<Rank, RankAction>;

/// Shared-rank actions, or `None` when some rank does not already hold data
/// belonging to its destination shard (e.g. a pipelined destination whose
/// first stage covers only part of the shared rank set).
fn shared_rank_actions(
    relation: DpRelation,
    sources: &[SourceShard],
    dests: &[DestShard],
) -> Option<(ActionMap, ActionMap)> {
    let mut src_of: BTreeMap<Rank, usize> = BTreeMap::new();
    for s in sources {
        for &r in &s.holders {
            src_of.insert(r, s.dp);
        }
    }
    let mut dst_of: BTreeMap<Rank, usize> = BTreeMap::new();
    for d in dests {
        for &r in &d.members {
            dst_of.insert(r, d.dp);
        }
    }
    if src_of.keys().ne(dst_of.keys()) {
        return None;
    }
    let mut forward = BTreeMap::new();
    let mut backward = BTreeMap::new();
    match relation {
        DpRelation::Equal => {
            for (&r, &s) in &src_of {
                if dst_of[&r] != s {
                    return None;
                }
                forward.insert(r, RankAction::RankLocal);
                backward.insert(r, RankAction::RankLocal);
            }
        }
        DpRelation::FanIn(k) => {
            for d in dests {
                // the k children of d, each replicated the same number of times in d's members
                let groups = replica_groups(&d.members, k, |r| {
                    let s = src_of[&r];
                    (s / k == d.dp).then_some(s % k)
                })?;
                for group in groups {
                    for (pos, &r) in group.iter().enumerate() {
                        let own = sources[d.dp * k + pos].interval;
                        forward.insert(
                            r,
                            RankAction::AllGather {
                                group: group.clone(),
                                own,
                            },
                        );
                        backward.insert(
                            r,
                            RankAction::IntervalSelect {
                                parent: d.interval,
                                interval: own,
                            },
                        );
                    }
                }
            }
        }
        DpRelation::FanOut(k) => {
            for s in sources {
                let groups = replica_groups(&s.holders, k, |r| {
                    let d = dst_of[&r];
                    (d / k == s.dp).then_some(d % k)
                })?;
                for group in groups {
                    for (pos, &r) in group.iter().enumerate() {
                        let own = dests[s.dp * k + pos].interval;
                        forward.insert(
                            r,
                            RankAction::IntervalSelect {
                                parent: s.interval,
                                interval: own,
                            },
                        );
                        backward.insert(
                            r,
                            RankAction::AllGather {
                                group: group.clone(),
                                own,
                            },
                        );
                    }
                }
            }
        }
    }
    Some((forward, backward))
}

/// Splits `ranks` into groups holding one rank per position `0..k`, where
/// `position` maps a rank to its slot (or `None` if it belongs elsewhere).
fn replica_groups(ranks: &[Rank], k: usize, position: impl Fn(Rank) -> Option<usize>) -> Option<Vec<Vec<Rank>>> {
    let mut by_pos: Vec<Vec<Rank>> = vec![Vec::new(); k];
    for &r in ranks {
        by_pos[position(r)?].push(r);
    }
    let m = by_pos[0].len();
    if m == 0 || by_pos.iter().any(|v| v.len() != m) {
        return None;
    }
    Some((0..m).map(|j| by_pos.iter().map(|v| v[j]).collect()).collect())
}

impl BridgePlan {
    pub fn label(&self) -> String {
        self.edge.label()
    }

    pub fn broadcast_label(&self) -> String {
        format!("{}/bcast", self.label())
    }

    pub fn gather_label(&self) -> String {
        format!("{}/gather", self.label())
    }

    pub fn is_shared_rank(&self) -> bool {
        matches!(self.transport, Transport::SharedRank { .. })
    }

    pub fn width(&self) -> usize {
        self.edge.feature_width
    }

    pub fn source_shard_of(&self, rank: Rank) -> Option<&SourceShard> {
        self.sources.iter().find(|s| s.holders.contains(&rank))
    }

    pub fn dest_shard_of(&self, rank: Rank) -> Option<&DestShard> {
        self.dests.iter().find(|d| d.members.contains(&rank))
    }

    /// Every rank taking part in the edge, ascending.
    pub fn participants(&self) -> Vec<Rank> {
        let mut ranks: Vec<Rank> = self
            .sources
            .iter()
            .flat_map(|s| s.holders.iter().copied())
            .chain(self.dests.iter().flat_map(|d| d.members.iter().copied()))
            .collect();
        ranks.sort_unstable();
        ranks.dedup();
        ranks
    }

    /// Ordered `(source shard, interval)` records forming destination shard `d`.
    pub fn dest_records(&self, d: usize) -> Vec<(usize, BatchInterval)> {
        self.transfers
            .iter()
            .filter(|t| t.dst_shard == d)
            .map(|t| (t.src_shard, t.interval))
            .collect()
    }

    /// Ordered `(destination shard, interval)` records split from source shard `s`.
    pub fn source_records(&self, s: usize) -> Vec<(usize, BatchInterval)> {
        self.transfers
            .iter()
            .filter(|t| t.src_shard == s)
            .map(|t| (t.dst_shard, t.interval))
            .collect()
    }

    /// Point-to-point messages crossing between distinct ranks, per
    /// microbatch and direction.
    pub fn p2p_messages_per_direction(&self) -> usize {
        match self.transport {
            Transport::LeaderRouted => self.transfers.iter().filter(|t| t.src_leader != t.dst_leader).count(),
            Transport::SharedRank { .. } => 0,
        }
    }

    /// Distinct collective groups the shared-rank transport forms per direction.
    pub fn shared_rank_groups(&self) -> (Vec<Vec<Rank>>, Vec<Vec<Rank>>) {
        let collect = |m: &ActionMap| {
            let mut groups: Vec<Vec<Rank>> = m
                .values()
                .filter_map(|a| match a {
                    RankAction::AllGather { group, .. } => Some(group.clone()),
                    _ => None,
                })
                .collect();
            groups.sort();
            groups.dedup();
            groups
        };
        match &self.transport {
            Transport::SharedRank { forward, backward } => (collect(forward), collect(backward)),
            Transport::LeaderRouted => (Vec::new(), Vec::new()),
        }
    }

    /// Structured text, one line per transfer or collective.
    pub fn export_text(&self) -> String {
        let w = self.width();
        let bytes = |iv: &BatchInterval| iv.len * w * ELEMENT_BYTES;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "plan {} placement={} relation={} batch={} width={}",
            self.label(),
            self.placement,
            self.relation,
            self.edge.global_batch,
            w
        );
        let fmt_group = |g: &[Rank]| format!("[{}]", g.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(","));
        match &self.transport {
            Transport::LeaderRouted => {
                for (dir, reverse) in [("fwd", false), ("bwd", true)] {
                    for t in &self.transfers {
                        let (a, b) = if reverse {
                            (t.dst_leader, t.src_leader)
                        } else {
                            (t.src_leader, t.dst_leader)
                        };
                        let kind = if a == b { "local" } else { "send" };
                        let _ = writeln!(
                            out,
                            "{dir} {kind} {a} -> {b} {} {}",
                            t.interval,
                            if a == b { 0 } else { bytes(&t.interval) }
                        );
                    }
                    let bcasts: Vec<(Rank, &[Rank], BatchInterval)> = if reverse {
                        self.sources
                            .iter()
                            .map(|s| (s.leader, s.holders.as_slice(), s.interval))
                            .collect()
                    } else {
                        self.dests
                            .iter()
                            .map(|d| (d.leader, d.members.as_slice(), d.interval))
                            .collect()
                    };
                    for (root, group, iv) in bcasts {
                        let _ = writeln!(
                            out,
                            "{dir} bcast {root} -> {} {} {}",
                            fmt_group(group),
                            iv,
                            (group.len() - 1) * bytes(&iv)
                        );
                    }
                }
            }
            Transport::SharedRank { forward, backward } => {
                for (dir, actions) in [("fwd", forward), ("bwd", backward)] {
                    for (rank, action) in actions {
                        let line = match action {
                            RankAction::RankLocal => format!("{dir} local {rank} 0"),
                            RankAction::IntervalSelect { parent, interval } => {
                                format!("{dir} select {rank} {parent} -> {interval} 0")
                            }
                            RankAction::AllGather { group, own } => format!(
                                "{dir} all-gather {rank} -> {} {} {}",
                                fmt_group(group),
                                own,
                                (group.len() - 1) * bytes(own)
                            ),
                        };
                        let _ = writeln!(out, "{line}");
                    }
                }
            }
        }
        out
    }
}

/// One rank's view of an edge: executes its half of each transform and keeps
/// the per-microbatch forward records that backward consumes.
pub struct BridgeEndpoint {
    plan: Rc<BridgePlan>,
    rank: Rank,
    records: BTreeMap<usize, ()>,
}

impl BridgeEndpoint {
    pub fn new(plan: Rc<BridgePlan>, rank: Rank) -> Self {
        Self {
            plan,
            rank,
            records: BTreeMap::new(),
        }
    }

    pub fn plan(&self) -> &BridgePlan {
        &self.plan
    }

    /// Microbatches forwarded but not yet sent backward.
    pub fn open_records(&self) -> Vec<usize> {
        self.records.keys().copied().collect()
    }

    fn check_shard(&self, expected: BatchInterval, t: &ShardedTensor, grad: bool) -> Result<(), BridgeError> {
        if t.interval != expected || t.feature_width != self.plan.width() {
            let (expected, got) = (
                format!("{expected} x {}", self.plan.width()),
                format!("{} x {}", t.interval, t.feature_width),
            );
            return Err(if grad {
                BridgeError::GradIntervalMismatch {
                    rank: self.rank,
                    expected,
                    got,
                }
            } else {
                BridgeError::ShardIntervalMismatch {
                    rank: self.rank,
                    expected,
                    got,
                }
            });
        }
        Ok(())
    }

    /// Forward half of the transform for microbatch `mb`. Source ranks pass
    /// their shard; destination ranks receive their destination-layout shard.
    pub async fn forward(
        &mut self,
        comm: &Comm,
        input: Option<&ShardedTensor>,
        mb: usize,
    ) -> Result<Option<ShardedTensor>, BridgeError> {
        let plan = Rc::clone(&self.plan);
        let src = plan.source_shard_of(self.rank);
        let dst = plan.dest_shard_of(self.rank);
        if src.is_none() && dst.is_none() {
            return Err(BridgeError::NotAParticipant {
                rank: self.rank,
                edge: plan.label(),
            });
        }
        if self.records.insert(mb, ()).is_some() {
            return Err(BridgeError::DuplicateMicrobatch { edge: plan.label(), mb });
        }
        if let Some(s) = src {
            let input = input.ok_or(BridgeError::MissingSourceShard { rank: self.rank })?;
            self.check_shard(s.interval, input, false)?;
        }
        let w = plan.width();
        match &plan.transport {
            Transport::SharedRank { forward, .. } => {
                let d = dst.expect("aligned");
                let input = input.expect("checked");
                let payload = match &forward[&self.rank] {
                    RankAction::RankLocal => input.payload.clone(),
                    RankAction::IntervalSelect { interval, .. } => input.rows(*interval),
                    RankAction::AllGather { group, .. } => {
                        comm.all_gather(group, &Tag::fwd(plan.gather_label(), mb), input.payload.clone())
                            .await?
                    }
                };
                Ok(Some(ShardedTensor::new(d.interval, w, payload)?))
            }
            Transport::LeaderRouted => {
                let tag = Tag::fwd(plan.label(), mb);
                let mut local: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                if let Some(s) = src {
                    if s.leader == self.rank {
                        let input = input.expect("checked");
                        for (i, t) in plan.transfers.iter().enumerate() {
                            if t.src_shard != s.dp {
                                continue;
                            }
                            let slice = input.rows(t.interval);
                            if t.dst_leader == self.rank {
                                local.insert(i, slice);
                            } else {
                                comm.send(t.dst_leader, &tag, slice)?;
                            }
                        }
                    }
                }
                let Some(d) = dst else {
                    return Ok(None);
                };
                let gathered = if d.leader == self.rank {
                    let mut buf = Vec::with_capacity(d.interval.len * w);
                    for (i, t) in plan.transfers.iter().enumerate() {
                        if t.dst_shard != d.dp {
                            continue;
                        }
                        let part = match local.remove(&i) {
                            Some(p) => p,
                            None => comm.recv(t.src_leader, &tag).await?,
                        };
                        if part.len() != t.interval.len * w {
                            return Err(BridgeError::PayloadShape {
                                rows: t.interval.len,
                                width: w,
                                got: part.len(),
                            });
                        }
                        buf.extend(part);
                    }
                    Some(buf)
                } else {
                    None
                };
                let payload = comm
                    .broadcast(&d.members, d.leader, &Tag::fwd(plan.broadcast_label(), mb), gathered)
                    .await?;
                Ok(Some(ShardedTensor::new(d.interval, w, payload)?))
            }
        }
    }

    /// Backward half for microbatch `mb`. Destination ranks pass their
    /// gradient (only the leader's is routed); source ranks receive the
    /// gradient for exactly their forward interval.
    pub async fn backward(
        &mut self,
        comm: &Comm,
        grad: Option<&ShardedTensor>,
        mb: usize,
    ) -> Result<Option<ShardedTensor>, BridgeError> {
        let plan = Rc::clone(&self.plan);
        if self.records.remove(&mb).is_none() {
            return Err(BridgeError::UnknownMicrobatch { edge: plan.label(), mb });
        }
        let src = plan.source_shard_of(self.rank);
        let dst = plan.dest_shard_of(self.rank);
        if let (Some(d), Some(g)) = (dst, grad) {
            self.check_shard(d.interval, g, true)?;
        }
        let w = plan.width();
        match &plan.transport {
            Transport::SharedRank { backward, .. } => {
                let s = src.expect("aligned");
                let grad = grad.ok_or(BridgeError::MissingGradShard { rank: self.rank })?;
                let payload = match &backward[&self.rank] {
                    RankAction::RankLocal => grad.payload.clone(),
                    RankAction::IntervalSelect { interval, .. } => grad.rows(*interval),
                    RankAction::AllGather { group, .. } => {
                        comm.all_gather(group, &Tag::bwd(plan.gather_label(), mb), grad.payload.clone())
                            .await?
                    }
                };
                Ok(Some(ShardedTensor::new(s.interval, w, payload)?))
            }
            Transport::LeaderRouted => {
                let tag = Tag::bwd(plan.label(), mb);
                let mut local: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                if let Some(d) = dst {
                    if d.leader == self.rank {
                        let grad = grad.ok_or(BridgeError::MissingGradShard { rank: self.rank })?;
                        for (i, t) in plan.transfers.iter().enumerate() {
                            if t.dst_shard != d.dp {
                                continue;
                            }
                            let slice = grad.rows(t.interval);
                            if t.src_leader == self.rank {
                                local.insert(i, slice);
                            } else {
                                comm.send(t.src_leader, &tag, slice)?;
                            }
                        }
                    }
                }
                let Some(s) = src else {
                    return Ok(None);
                };
                let gathered = if s.leader == self.rank {
                    let mut buf = Vec::with_capacity(s.interval.len * w);
                    for (i, t) in plan.transfers.iter().enumerate() {
                        if t.src_shard != s.dp {
                            continue;
                        }
                        let part = match local.remove(&i) {
                            Some(p) => p,
                            None => comm.recv(t.dst_leader, &tag).await?,
                        };
                        if part.len() != t.interval.len * w {
                            return Err(BridgeError::PayloadShape {
                                rows: t.interval.len,
                                width: w,
                                got: part.len(),
                            });
                        }
                        buf.extend(part);
                    }
                    Some(buf)
                } else {
                    None
                };
                let payload = comm
                    .broadcast(&s.holders, s.leader, &Tag::bwd(plan.broadcast_label(), mb), gathered)
                    .await?;
                Ok(Some(ShardedTensor::new(s.interval, w, payload)?))
            }
        }
    }
}

/// Whole-edge driver: runs every participant's half of a transform on a
/// fabric in one go.
pub struct BridgeSession {
    plan: Rc<BridgePlan>,
    endpoints: BTreeMap<Rank, BridgeEndpoint>,
}

impl BridgeSession {
    pub fn new(plan: BridgePlan) -> Self {
        let plan = Rc::new(plan);
        let endpoints = plan
            .participants()
            .into_iter()
            .map(|r| (r, BridgeEndpoint::new(Rc::clone(&plan), r)))
            .collect();
        Self { plan, endpoints }
    }

    pub fn plan(&self) -> &BridgePlan {
        &self.plan
    }

    /// `shards` maps each source rank to its shard; returns the shard held by
    /// every destination rank.
    pub fn forward(
        &mut self,
        fabric: &mut Fabric,
        shards: &BTreeMap<Rank, ShardedTensor>,
        mb: usize,
    ) -> Result<BTreeMap<Rank, ShardedTensor>, BridgeError> {
        for s in &self.plan.sources {
            for r in &s.holders {
                if !shards.contains_key(r) {
                    return Err(BridgeError::MissingSourceShard { rank: *r });
                }
            }
        }
        let scripts: Vec<(Rank, RankScript<'_, (Rank, Option<ShardedTensor>), BridgeError>)> = self
            .endpoints
            .iter_mut()
            .map(|(&r, ep)| {
                let comm = fabric.comm(r);
                let input = shards.get(&r);
                let fut: RankScript<'_, _, BridgeError> =
                    Box::pin(async move { Ok((r, ep.forward(&comm, input, mb).await?)) });
                (r, fut)
            })
            .collect();
        let out = fabric.run(scripts)?;
        Ok(out.into_iter().filter_map(|(r, t)| t.map(|t| (r, t))).collect())
    }

    /// `grads` maps destination ranks to gradients; every replica of a
    /// destination shard that is supplied must match its leader's.
    pub fn backward(
        &mut self,
        fabric: &mut Fabric,
        grads: &BTreeMap<Rank, ShardedTensor>,
        mb: usize,
    ) -> Result<BTreeMap<Rank, ShardedTensor>, BridgeError> {
        for d in &self.plan.dests {
            let lead = grads
                .get(&d.leader)
                .ok_or(BridgeError::MissingGradShard { rank: d.leader })?;
            for r in &d.members {
                if let Some(g) = grads.get(r) {
                    if g.payload != lead.payload {
                        return Err(BridgeError::ReplicaDivergence { shard: d.dp });
                    }
                }
            }
        }
        let scripts: Vec<(Rank, RankScript<'_, (Rank, Option<ShardedTensor>), BridgeError>)> = self
            .endpoints
            .iter_mut()
            .map(|(&r, ep)| {
                let comm = fabric.comm(r);
                let grad = grads.get(&r);
                let fut: RankScript<'_, _, BridgeError> =
                    Box::pin(async move { Ok((r, ep.backward(&comm, grad, mb).await?)) });
                (r, fut)
            })
            .collect();
        let out = fabric.run(scripts)?;
        Ok(out.into_iter().filter_map(|(r, t)| t.map(|t| (r, t))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ModuleLayout;
    use crate::simnet::Direction;

    fn layout(name: &str, tp: usize, dp: usize, offset: usize) -> ModuleLayout {
        ModuleLayout::new(name, tp, 1, 1, dp, offset).unwrap()
    }

    /// Global tensor with value `sample * 100 + feature`.
    fn global(b: usize, w: usize) -> Vec<f64> {
        (0..b).flat_map(|j| (0..w).map(move |f| (j * 100 + f) as f64)).collect()
    }

    fn source_shards(plan: &BridgePlan, g: &[f64]) -> BTreeMap<Rank, ShardedTensor> {
        let w = plan.width();
        let mut out = BTreeMap::new();
        for s in &plan.sources {
            let iv = s.interval;
            let data = g[iv.start * w..iv.end() * w].to_vec();
            for &r in &s.holders {
                out.insert(r, ShardedTensor::new(iv, w, data.clone()).unwrap());
            }
        }
        out
    }

    #[test]
    fn classify_examples() {
        let e = |a, b| BoundaryEdge::new(layout("u", 1, a, 0), layout("v", 1, b, 100), 24, 1);
        assert_eq!(classify_dp_relation(&e(4, 2)).unwrap(), DpRelation::FanIn(2));
        assert_eq!(classify_dp_relation(&e(8, 8)).unwrap(), DpRelation::Equal);
        assert_eq!(classify_dp_relation(&e(2, 8)).unwrap(), DpRelation::FanOut(4));
        assert!(matches!(
            classify_dp_relation(&e(3, 2)),
            Err(BridgeError::NonIntegerFan { src: 3, dst: 2 })
        ));
    }

    #[test]
    fn equal_dp_colocated_is_rank_local() {
        let edge = BoundaryEdge::new(layout("enc", 2, 2, 0), layout("llm", 2, 2, 0), 8, 5);
        let plan = plan_bridge(&edge).unwrap();
        match &plan.transport {
            Transport::SharedRank { forward, backward } => {
                assert!(forward.values().all(|a| *a == RankAction::RankLocal));
                assert!(backward.values().all(|a| *a == RankAction::RankLocal));
            }
            other => panic!("expected shared-rank, got {other:?}"),
        }
        assert_eq!(plan.shared_rank_groups(), (vec![], vec![]));

        let g = global(8, 5);
        let shards = source_shards(&plan, &g);
        let mut fabric = Fabric::new(4);
        let mut session = BridgeSession::new(plan);
        let out = session.forward(&mut fabric, &shards, 0).unwrap();
        for (r, t) in &out {
            assert_eq!(t, &shards[r]);
        }
        let back = session.backward(&mut fabric, &out, 0).unwrap();
        assert_eq!(back, shards);
        assert!(fabric.ledger_snapshot().unwrap().is_empty());
    }

    #[test]
    fn nc_fan_in_routes_four_records() {
        // encoder tp=1 dp=4 on ranks [4, 8), llm tp=2 dp=2 on ranks [0, 4), B = 8
        let enc = layout("enc", 1, 4, 4);
        let llm = layout("llm", 2, 2, 0);
        let plan = plan_bridge(&BoundaryEdge::new(enc, llm, 8, 3)).unwrap();
        assert_eq!(plan.relation, DpRelation::FanIn(2));
        assert_eq!(plan.transfers.len(), 4);
        // brute force: sample j belongs to source shard j*4/8 and dest shard j*2/8
        for d in 0..2 {
            let mut expect: Vec<(usize, BatchInterval)> = Vec::new();
            for j in 0..8 {
                if j * 2 / 8 != d {
                    continue;
                }
                let s = j * 4 / 8;
                match expect.last_mut() {
                    Some((ls, iv)) if *ls == s => iv.len += 1,
                    _ => expect.push((s, BatchInterval::new(j, 1))),
                }
            }
            assert_eq!(plan.dest_records(d), expect);
        }
        assert_eq!(
            plan.dest_records(0),
            vec![(0, BatchInterval::new(0, 2)), (1, BatchInterval::new(2, 2))]
        );
        assert_eq!(plan.transfers[0].src_leader, 4);
        assert_eq!(plan.transfers[1].src_leader, 5);
        assert_eq!(plan.dests[0].members, vec![0, 1]);
        assert_eq!(plan.dests[1].members, vec![2, 3]);
    }

    #[test]
    fn wider_source_tp_keeps_record_count() {
        let llm = layout("llm", 2, 2, 0);
        let narrow = plan_bridge(&BoundaryEdge::new(layout("enc", 1, 4, 4), llm.clone(), 8, 3)).unwrap();
        let wide = plan_bridge(&BoundaryEdge::new(layout("enc", 4, 4, 4), llm, 8, 3)).unwrap();
        assert_eq!(narrow.p2p_messages_per_direction(), 4);
        assert_eq!(wide.p2p_messages_per_direction(), 4);
        assert_eq!(wide.sources[1].holders, vec![8, 9, 10, 11]);
    }

    #[test]
    fn fan_in_forward_and_backward_round_trip() {
        let enc = layout("enc", 1, 4, 4);
        let llm = layout("llm", 2, 2, 0);
        let plan = plan_bridge(&BoundaryEdge::new(enc, llm, 8, 3)).unwrap();
        let g = global(8, 3);
        let shards = source_shards(&plan, &g);
        let mut fabric = Fabric::new(8);
        let mut session = BridgeSession::new(plan);
        let out = session.forward(&mut fabric, &shards, 0).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out[&0].payload, g[0..12].to_vec());
        assert_eq!(out[&1].payload, g[0..12].to_vec());
        assert_eq!(out[&3].payload, g[12..24].to_vec());

        let fwd_bytes = fabric.ledger_snapshot().unwrap().get("enc->llm", Direction::Fwd);
        assert_eq!(fwd_bytes.messages, 4);
        assert_eq!(fwd_bytes.bytes, 192);

        let back = session.backward(&mut fabric, &out, 0).unwrap();
        assert_eq!(back, shards);
        assert!(matches!(
            session.backward(&mut fabric, &out, 0),
            Err(BridgeError::UnknownMicrobatch { mb: 0, .. })
        ));
    }

    #[test]
    fn fan_out_non_colocated_sends_one_message_per_dest_leader() {
        let enc = layout("enc", 2, 2, 0);
        let llm = layout("llm", 1, 4, 4);
        let plan = plan_bridge(&BoundaryEdge::new(enc, llm, 8, 3)).unwrap();
        let g = global(8, 3);
        let shards = source_shards(&plan, &g);
        let mut fabric = Fabric::new(8);
        let mut session = BridgeSession::new(plan);
        let out = session.forward(&mut fabric, &shards, 0).unwrap();
        let trace = fabric.trace_export();
        for d in 4..8 {
            let recvs: Vec<_> = trace
                .events
                .iter()
                .filter(|e| e.rank == d && e.kind == crate::simnet::EventKind::Recv)
                .collect();
            assert_eq!(recvs.len(), 1);
            assert_eq!(recvs[0].bytes, (8 / 4 * 3 * 8) as u64);
        }
        assert_eq!(out[&5].payload, g[6..12].to_vec());
    }

    #[test]
    fn colocated_fan_in_gathers_pairs() {
        // encoder tp=1 dp=8, llm tp=2 dp=4 on the same 8 ranks
        let enc = layout("enc", 1, 8, 0);
        let llm = layout("llm", 2, 4, 0);
        let plan = plan_bridge(&BoundaryEdge::new(enc, llm, 16, 2)).unwrap();
        let (fwd, bwd) = plan.shared_rank_groups();
        assert!(bwd.is_empty());
        assert_eq!(fwd, vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]]);
        let g = global(16, 2);
        let shards = source_shards(&plan, &g);
        let mut fabric = Fabric::new(8);
        let mut session = BridgeSession::new(plan);
        let out = session.forward(&mut fabric, &shards, 3).unwrap();
        assert_eq!(out[&2].payload, g[8..16].to_vec());
        let back = session.backward(&mut fabric, &out, 3).unwrap();
        assert_eq!(back, shards);
        let ledger = fabric.ledger_snapshot().unwrap();
        assert_eq!(ledger.get("enc->llm", Direction::Fwd).messages, 0);
        assert_eq!(ledger.get("enc->llm/gather", Direction::Fwd).messages, 4 * 2);
        assert_eq!(ledger.get("enc->llm/gather", Direction::Bwd).messages, 0);
    }

    #[test]
    fn colocated_fan_out_selects_then_gathers_siblings() {
        // encoder tp=2 dp=2, llm tp=1 dp=4 on 4 shared ranks
        let enc = layout("enc", 2, 2, 0);
        let llm = layout("llm", 1, 4, 0);
        let plan = plan_bridge(&BoundaryEdge::new(enc, llm, 8, 1)).unwrap();
        assert!(plan.is_shared_rank());
        let g = global(8, 1);
        let shards = source_shards(&plan, &g);
        let mut fabric = Fabric::new(4);
        let mut session = BridgeSession::new(plan);
        let out = session.forward(&mut fabric, &shards, 0).unwrap();
        assert_eq!(out[&1].interval, BatchInterval::new(2, 2));
        assert_eq!(out[&1].payload, vec![200.0, 300.0]);
        // backward reconstructs [0,4) on rank 0 from sibling [0,2) and [2,4)
        let grads: BTreeMap<Rank, ShardedTensor> = out
            .iter()
            .map(|(&r, t)| {
                let p = t.payload.iter().map(|x| x + 0.5).collect();
                (r, ShardedTensor::new(t.interval, 1, p).unwrap())
            })
            .collect();
        let back = session.backward(&mut fabric, &grads, 0).unwrap();
        let oracle: Vec<f64> = (0..4).map(|j| j as f64 * 100.0 + 0.5).collect();
        assert_eq!(back[&0].payload, oracle);
        assert_eq!(back[&1].payload, oracle);
        assert_eq!(
            fabric
                .ledger_snapshot()
                .unwrap()
                .get("enc->llm", Direction::Fwd)
                .messages,
            0
        );
    }

    #[test]
    fn pipelined_colocated_destination_falls_back_to_routing() {
        let enc = layout("enc", 1, 4, 0);
        let llm = ModuleLayout::new("llm", 1, 1, 2, 2, 0).unwrap();
        let plan = plan_bridge(&BoundaryEdge::new(enc, llm, 8, 2)).unwrap();
        assert_eq!(plan.placement, Placement::Colocated);
        assert_eq!(plan.transport, Transport::LeaderRouted);
        let g = global(8, 2);
        let shards = source_shards(&plan, &g);
        let mut fabric = Fabric::new(4);
        let mut session = BridgeSession::new(plan);
        let out = session.forward(&mut fabric, &shards, 0).unwrap();
        assert_eq!(out.keys().copied().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(out[&1].payload, g[8..16].to_vec());
        assert_eq!(session.backward(&mut fabric, &out, 0).unwrap(), shards);
    }

    #[test]
    fn mismatched_and_missing_shards() {
        let plan = plan_bridge(&BoundaryEdge::new(layout("enc", 1, 2, 2), layout("llm", 1, 2, 0), 4, 1)).unwrap();
        let mut shards = source_shards(&plan, &global(4, 1));
        let mut fabric = Fabric::new(4);
        let mut session = BridgeSession::new(plan.clone());
        let bad = ShardedTensor::new(BatchInterval::new(0, 2), 1, vec![0.0, 1.0]).unwrap();
        shards.insert(3, bad);
        assert!(matches!(
            session.forward(&mut fabric, &shards, 0),
            Err(BridgeError::ShardIntervalMismatch { rank: 3, .. })
        ));
        shards.remove(&3);
        let mut session = BridgeSession::new(plan);
        assert!(matches!(
            session.forward(&mut Fabric::new(4), &shards, 0),
            Err(BridgeError::MissingSourceShard { rank: 3 })
        ));
    }

    #[test]
    fn partial_overlap_is_infeasible() {
        let a = ModuleLayout::new("a", 6, 1, 1, 1, 0).unwrap();
        let b = ModuleLayout::new("b", 4, 1, 1, 1, 4).unwrap();
        assert!(matches!(
            plan_bridge(&BoundaryEdge::new(a, b, 4, 1)),
            Err(BridgeError::PlanInfeasible(_))
        ));
    }

    #[test]
    fn export_lists_transfers_and_broadcasts() {
        let plan = plan_bridge(&BoundaryEdge::new(layout("enc", 1, 4, 4), layout("llm", 2, 2, 0), 8, 3)).unwrap();
        let text = plan.export_text();
        let expected = "\
plan enc->llm placement=non-colocated relation=fan-in(2) batch=8 width=3
fwd send 4 -> 0 [0,2) 48
fwd send 5 -> 0 [2,4) 48
fwd send 6 -> 2 [4,6) 48
fwd send 7 -> 2 [6,8) 48
fwd bcast 0 -> [0,1] [0,4) 96
fwd bcast 2 -> [2,3] [4,8) 96
bwd send 0 -> 4 [0,2) 48
bwd send 0 -> 5 [2,4) 48
bwd send 2 -> 6 [4,6) 48
bwd send 2 -> 7 [6,8) 48
bwd bcast 4 -> [4] [0,2) 0
bwd bcast 5 -> [5] [2,4) 0
bwd bcast 6 -> [6] [4,6) 0
bwd bcast 7 -> [7] [6,8) 0
";
        assert_eq!(text, expected);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn edge_strategy() -> impl Strategy<Value = (BoundaryEdge, bool)> {
            (
                0usize..3,
                0usize..3,
                prop_oneof![Just(1usize), Just(2), Just(4)],
                prop_oneof![Just(1usize), Just(2), Just(4)],
                any::<bool>(),
                1usize..4,
                1usize..3,
            )
                .prop_map(|(tpu, tpv, dpu, dpv, colo, width, reps)| {
                    let (tpu, tpv) = (1 << tpu, 1 << tpv);
                    let batch = 4 * reps;
                    let u_world = tpu * dpu;
                    let (dpv, offset) = if colo {
                        // the destination must cover the same ranks
                        ((u_world / tpv).max(1), 0)
                    } else {
                        (dpv, u_world)
                    };
                    let colo = colo && tpv * dpv == u_world;
                    let offset = if colo { 0 } else { offset.max(u_world) };
                    let u = ModuleLayout::new("u", tpu, 1, 1, dpu, 0).unwrap();
                    let v = ModuleLayout::new("v", tpv, 1, 1, dpv, offset).unwrap();
                    (BoundaryEdge::new(u, v, batch * dpu.max(dpv), width), colo)
                })
        }

        proptest! {
            #[test]
            fn round_trip_restores_ownership((edge, colo) in edge_strategy()) {
                let plan = plan_bridge(&edge).unwrap();
                prop_assert_eq!(plan.placement == Placement::Colocated, colo);
                let w = plan.width();
                let g = global(edge.global_batch, w);
                let shards = source_shards(&plan, &g);
                let world = plan.participants().last().unwrap() + 1;
                let mut fabric = Fabric::new(world);
                let mut session = BridgeSession::new(plan.clone());
                let out = session.forward(&mut fabric, &shards, 0).unwrap();
                for d in &plan.dests {
                    for r in &d.members {
                        let iv = d.interval;
                        prop_assert_eq!(&out[r].payload, &g[iv.start * w..iv.end() * w].to_vec());
                    }
                }
                // routed payload covers every sample exactly once
                let fwd = fabric.ledger_snapshot().unwrap().get(&plan.label(), Direction::Fwd);
                let local: usize = plan.transfers.iter()
                    .filter(|t| t.src_leader == t.dst_leader)
                    .map(|t| t.interval.len)
                    .sum();
                if plan.is_shared_rank() {
                    prop_assert_eq!(fwd.messages, 0);
                } else {
                    let routed = (edge.global_batch - local) * w * ELEMENT_BYTES;
                    prop_assert_eq!(fwd.bytes as usize, routed);
                }
                let back = session.backward(&mut fabric, &out, 0).unwrap();
                prop_assert_eq!(back, shards);
                prop_assert_eq!(fabric.undelivered(), 0);
            }
        }
    }
}
