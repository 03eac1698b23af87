//! Deterministic virtual-rank message fabric.
//!
//! Each rank runs a script (a future) against a [`Comm`] handle. The fabric
//! polls scripts on a single thread and always advances the lowest runnable
//! rank: after any rank makes progress, scanning restarts from rank 0. A
//! script runs until it blocks on a receive or a collective. Sends are
//! buffered and never block. If a full scan makes no progress while scripts
//! remain, the run fails with [`SimError::Deadlock`] naming every waiting rank.
//!
//! All traffic is accounted in a [`TrafficLedger`] (volume only, no timing)
//! and every send, receive, collective entry/exit and annotation is appended
//! to an [`EventTrace`].

use std::cell::RefCell;
use std::collections::{BTreeMap, VecDeque};
use std::fmt::{self, Write as _};
use std::future::{poll_fn, Future};
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use thiserror::Error;

use crate::grid::Rank;

/// Size in bytes of every payload element.
pub const ELEMENT_BYTES: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("deadlock: {}", format_waits(.waiting))]
    Deadlock { waiting: Vec<(Rank, String)> },
    #[error("group mismatch on `{label}` at rank {rank}: {detail}")]
    GroupMismatch { rank: Rank, label: String, detail: String },
    #[error("shape mismatch on `{label}`: expected {expected} elements, rank {rank} supplied {got}")]
    ShapeMismatch {
        label: String,
        rank: Rank,
        expected: usize,
        got: usize,
    },
    #[error("rank {rank} cannot send to itself on `{label}`")]
    SelfSend { rank: Rank, label: String },
    #[error("rank {rank} is outside the {world}-rank world")]
    RankOutOfWorld { rank: Rank, world: usize },
    #[error("snapshot requested while {pending} collective(s) are in flight")]
    SnapshotWhileActive { pending: usize },
}

fn format_waits(waiting: &[(Rank, String)]) -> String {
    waiting
        .iter()
        .map(|(r, w)| format!("rank {r} waiting on {w}"))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Fwd,
    Bwd,
    None,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Fwd => "fwd",
            Direction::Bwd => "bwd",
            Direction::None => "-",
        })
    }
}

/// Identifies a message or collective: a ledger label, a direction and an
/// optional microbatch.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tag {
    pub label: String,
    pub dir: Direction,
    pub mb: Option<usize>,
}

impl Tag {
    pub fn new(label: impl Into<String>, dir: Direction, mb: Option<usize>) -> Self {
        Self {
            label: label.into(),
            dir,
            mb,
        }
    }

    pub fn fwd(label: impl Into<String>, mb: usize) -> Self {
        Self::new(label, Direction::Fwd, Some(mb))
    }

    pub fn bwd(label: impl Into<String>, mb: usize) -> Self {
        Self::new(label, Direction::Bwd, Some(mb))
    }

    pub fn plain(label: impl Into<String>) -> Self {
        Self::new(label, Direction::None, None)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.dir {
            Direction::None => write!(f, "{}", self.label),
            dir => write!(f, "{}:{}", self.label, dir),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LedgerEntry {
    pub messages: u64,
    pub bytes: u64,
}

/// Message counts and byte volumes per (label, direction).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficLedger {
    entries: BTreeMap<(String, Direction), LedgerEntry>,
}

impl TrafficLedger {
    pub(crate) fn record(&mut self, tag: &Tag, messages: u64, bytes: u64) {
        if messages == 0 {
            return;
        }
        let e = self.entries.entry((tag.label.clone(), tag.dir)).or_default();
        e.messages += messages;
        e.bytes += bytes;
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, label: &str, dir: Direction) -> LedgerEntry {
        self.entries.get(&(label.to_string(), dir)).copied().unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Direction, LedgerEntry)> {
        self.entries.iter().map(|((l, d), e)| (l.as_str(), *d, *e))
    }

    /// Sums every entry whose label satisfies `pred`.
    pub fn total_where(&self, mut pred: impl FnMut(&str, Direction) -> bool) -> LedgerEntry {
        self.iter()
            .filter(|(l, d, _)| pred(l, *d))
            .fold(LedgerEntry::default(), |acc, (_, _, e)| LedgerEntry {
                messages: acc.messages + e.messages,
                bytes: acc.bytes + e.bytes,
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Send,
    Recv,
    CollectiveEnter,
    CollectiveExit,
    Note,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Send => "send",
            EventKind::Recv => "recv",
            EventKind::CollectiveEnter => "coll-enter",
            EventKind::CollectiveExit => "coll-exit",
            EventKind::Note => "note",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Peer {
    None,
    Rank(Rank),
    Group(Vec<Rank>),
}

impl fmt::Display for Peer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Peer::None => f.write_str("-"),
            Peer::Rank(r) => write!(f, "{r}"),
            Peer::Group(g) => {
                let parts: Vec<String> = g.iter().map(|r| r.to_string()).collect();
                write!(f, "[{}]", parts.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub seq: u64,
    pub rank: Rank,
    pub kind: EventKind,
    pub tag: Tag,
    pub peer: Peer,
    pub bytes: u64,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mb = match self.tag.mb {
            Some(mb) => mb.to_string(),
            None => "-".to_string(),
        };
        write!(
            f,
            "{} {} {} {} {} {} {}",
            self.seq, self.rank, self.kind, self.tag, self.peer, mb, self.bytes
        )
    }
}

/// Ordered record of fabric events.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventTrace {
    pub events: Vec<Event>,
}

impl EventTrace {
    /// Line-oriented export: `seq rank event label peer/group microbatch bytes`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let _ = writeln!(out, "{e}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CollectiveKind {
    Broadcast { root: Rank },
    AllGather,
    AllReduce,
    Barrier,
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CollectiveKind::Broadcast { root } => write!(f, "broadcast(root={root})"),
            CollectiveKind::AllGather => f.write_str("all-gather"),
            CollectiveKind::AllReduce => f.write_str("all-reduce"),
            CollectiveKind::Barrier => f.write_str("barrier"),
        }
    }
}

struct Slot {
    id: u64,
    label: String,
    dir: Direction,
    occurrence: u64,
    kind: CollectiveKind,
    group: Vec<Rank>,
    tag: Tag,
    contributions: BTreeMap<Rank, Vec<f64>>,
    results: Option<BTreeMap<Rank, Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct ChannelKey {
    src: Rank,
    dst: Rank,
    label: String,
    dir: Direction,
}

struct Message {
    tag: Tag,
    payload: Vec<f64>,
}

struct FabricState {
    world: usize,
    channels: BTreeMap<ChannelKey, VecDeque<Message>>,
    slots: Vec<Slot>,
    next_slot: u64,
    occurrences: BTreeMap<(Rank, String, Direction), u64>,
    ledger: TrafficLedger,
    events: Vec<Event>,
    progress: u64,
    waiting: BTreeMap<Rank, String>,
}

impl FabricState {
    fn push_event(&mut self, rank: Rank, kind: EventKind, tag: &Tag, peer: Peer, bytes: u64) {
        let seq = self.events.len() as u64;
        self.events.push(Event {
            seq,
            rank,
            kind,
            tag: tag.clone(),
            peer,
            bytes,
        });
        self.progress += 1;
    }

    fn check_rank(&self, rank: Rank) -> Result<(), SimError> {
        if rank >= self.world {
            Err(SimError::RankOutOfWorld {
                rank,
                world: self.world,
            })
        } else {
            Ok(())
        }
    }

    fn enter(
        &mut self,
        rank: Rank,
        kind: CollectiveKind,
        group: &[Rank],
        tag: &Tag,
        payload: Vec<f64>,
    ) -> Result<u64, SimError> {
        let mismatch = |detail: String| SimError::GroupMismatch {
            rank,
            label: tag.to_string(),
            detail,
        };
        for &r in group {
            self.check_rank(r)?;
        }
        if !group.contains(&rank) {
            return Err(mismatch(format!("rank is not a member of {group:?}")));
        }
        let mut dedup = group.to_vec();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != group.len() {
            return Err(mismatch(format!("duplicate members in {group:?}")));
        }
        if let CollectiveKind::Broadcast { root } = kind {
            if !group.contains(&root) {
                return Err(mismatch(format!("root {root} not in {group:?}")));
            }
        }

        let occ_key = (rank, tag.label.clone(), tag.dir);
        let occurrence = *self.occurrences.get(&occ_key).unwrap_or(&0);
        self.occurrences.insert(occ_key, occurrence + 1);

        let same_call = |s: &Slot| s.label == tag.label && s.dir == tag.dir && s.occurrence == occurrence;
        let idx = match self.slots.iter().position(|s| same_call(s) && s.group.contains(&rank)) {
            Some(i) => {
                let slot = &self.slots[i];
                if slot.group != group || slot.kind != kind {
                    return Err(mismatch(format!(
                        "declared {kind} over {group:?} but peers declared {} over {:?}",
                        slot.kind, slot.group
                    )));
                }
                i
            }
            None => {
                if let Some(other) = self
                    .slots
                    .iter()
                    .find(|s| same_call(s) && s.group.iter().any(|r| group.contains(r)))
                {
                    return Err(mismatch(format!(
                        "declared {group:?} but member(s) of it declared {:?}",
                        other.group
                    )));
                }
                let id = self.next_slot;
                self.next_slot += 1;
                self.slots.push(Slot {
                    id,
                    label: tag.label.clone(),
                    dir: tag.dir,
                    occurrence,
                    kind,
                    group: group.to_vec(),
                    tag: tag.clone(),
                    contributions: BTreeMap::new(),
                    results: None,
                });
                self.slots.len() - 1
            }
        };

        let bytes = (payload.len() * ELEMENT_BYTES) as u64;
        self.slots[idx].contributions.insert(rank, payload);
        let id = self.slots[idx].id;
        self.push_event(
            rank,
            EventKind::CollectiveEnter,
            tag,
            Peer::Group(group.to_vec()),
            bytes,
        );
        if self.slots[idx].contributions.len() == group.len() {
            self.complete(idx)?;
        }
        Ok(id)
    }

    fn complete(&mut self, idx: usize) -> Result<(), SimError> {
        let slot = &self.slots[idx];
        let n = slot.group.len() as u64;
        let contrib = |r: &Rank| &slot.contributions[r];
        let (result_for_all, messages, bytes): (Vec<f64>, u64, u64) = match slot.kind {
            CollectiveKind::Broadcast { root } => {
                let data = contrib(&root).clone();
                let b = (data.len() * ELEMENT_BYTES) as u64;
                (data, n - 1, (n - 1) * b)
            }
            CollectiveKind::AllGather => {
                let mut out = Vec::new();
                let mut b = 0u64;
                for r in &slot.group {
                    let piece = contrib(r);
                    b += (piece.len() * ELEMENT_BYTES) as u64 * (n - 1);
                    out.extend_from_slice(piece);
                }
                (out, n * (n - 1), b)
            }
            CollectiveKind::AllReduce => {
                let expected = contrib(&slot.group[0]).len();
                let mut acc = contrib(&slot.group[0]).clone();
                for r in &slot.group[1..] {
                    let piece = contrib(r);
                    if piece.len() != expected {
                        return Err(SimError::ShapeMismatch {
                            label: slot.tag.to_string(),
                            rank: *r,
                            expected,
                            got: piece.len(),
                        });
                    }
                    for (a, x) in acc.iter_mut().zip(piece) {
                        *a += x;
                    }
                }
                let b = (expected * ELEMENT_BYTES) as u64;
                (acc, n * (n - 1), n * (n - 1) * b)
            }
            CollectiveKind::Barrier => (Vec::new(), 0, 0),
        };
        let tag = slot.tag.clone();
        let results = slot.group.iter().map(|r| (*r, result_for_all.clone())).collect();
        self.slots[idx].results = Some(results);
        self.ledger.record(&tag, messages, bytes);
        self.progress += 1;
        Ok(())
    }

    fn take_result(&mut self, id: u64, rank: Rank) -> Option<Vec<f64>> {
        let idx = self.slots.iter().position(|s| s.id == id)?;
        let slot = &mut self.slots[idx];
        let results = slot.results.as_mut()?;
        let out = results.remove(&rank)?;
        let tag = slot.tag.clone();
        let group = slot.group.clone();
        if results.is_empty() {
            self.slots.remove(idx);
        }
        self.push_event(
            rank,
            EventKind::CollectiveExit,
            &tag,
            Peer::Group(group),
            (out.len() * ELEMENT_BYTES) as u64,
        );
        Some(out)
    }
}

/// Boxed per-rank script accepted by [`Fabric::run`].
pub type RankScript<'a, T, E> = Pin<Box<dyn Future<Output = Result<T, E>> + 'a>>;

/// The simulated world: message channels, collectives, ledger and trace.
pub struct Fabric {
    state: Rc<RefCell<FabricState>>,
}

impl Fabric {
    pub fn new(world: usize) -> Self {
        Self {
            state: Rc::new(RefCell::new(FabricState {
                world,
                channels: BTreeMap::new(),
                slots: Vec::new(),
                next_slot: 0,
                occurrences: BTreeMap::new(),
                ledger: TrafficLedger::default(),
                events: Vec::new(),
                progress: 0,
                waiting: BTreeMap::new(),
            })),
        }
    }

    pub fn world_size(&self) -> usize {
        self.state.borrow().world
    }

    /// A communication handle bound to `rank`.
    pub fn comm(&self, rank: Rank) -> Comm {
        Comm {
            rank,
            state: Rc::clone(&self.state),
        }
    }

    /// Runs `scripts` (each paired with its rank) to completion and returns
    /// their outputs in input order.
    pub fn run<'a, T, E>(&mut self, scripts: Vec<(Rank, RankScript<'a, T, E>)>) -> Result<Vec<T>, E>
    where
        E: From<SimError>,
    {
        let n = scripts.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| scripts[i].0);
        let ranks: Vec<Rank> = scripts.iter().map(|(r, _)| *r).collect();
        for &r in &ranks {
            self.state.borrow().check_rank(r)?;
        }
        let mut live: Vec<Option<RankScript<'a, T, E>>> = scripts.into_iter().map(|(_, s)| Some(s)).collect();
        let mut outputs: Vec<Option<T>> = (0..n).map(|_| None).collect();
        let mut cx = Context::from_waker(Waker::noop());
        let mut remaining = n;

        while remaining > 0 {
            let mut progressed = false;
            for &i in &order {
                let Some(fut) = live[i].as_mut() else {
                    continue;
                };
                let before = self.state.borrow().progress;
                match fut.as_mut().poll(&mut cx) {
                    Poll::Ready(Ok(v)) => {
                        outputs[i] = Some(v);
                        live[i] = None;
                        remaining -= 1;
                        self.state.borrow_mut().waiting.remove(&ranks[i]);
                        progressed = true;
                        break;
                    }
                    Poll::Ready(Err(e)) => return Err(e),
                    Poll::Pending => {
                        if self.state.borrow().progress != before {
                            progressed = true;
                            break;
                        }
                    }
                }
            }
            if !progressed {
                let st = self.state.borrow();
                let waiting = order
                    .iter()
                    .filter(|&&i| live[i].is_some())
                    .map(|&i| {
                        let r = ranks[i];
                        let what = st
                            .waiting
                            .get(&r)
                            .cloned()
                            .unwrap_or_else(|| "an unknown condition".to_string());
                        (r, what)
                    })
                    .collect();
                return Err(SimError::Deadlock { waiting }.into());
            }
        }
        Ok(outputs.into_iter().map(|o| o.expect("finished")).collect())
    }

    pub fn ledger_snapshot(&self) -> Result<TrafficLedger, SimError> {
        self.comm(0).ledger_snapshot()
    }

    pub fn trace_export(&self) -> EventTrace {
        EventTrace {
            events: self.state.borrow().events.clone(),
        }
    }

    /// Messages sent but never received.
    pub fn undelivered(&self) -> usize {
        self.state.borrow().channels.values().map(|q| q.len()).sum()
    }
}

/// Per-rank handle to the fabric.
#[derive(Clone)]
pub struct Comm {
    rank: Rank,
    state: Rc<RefCell<FabricState>>,
}

impl Comm {
    pub fn rank(&self) -> Rank {
        self.rank
    }

    /// Buffered point-to-point send; never blocks.
    pub fn send(&self, dst: Rank, tag: &Tag, payload: Vec<f64>) -> Result<(), SimError> {
        let mut st = self.state.borrow_mut();
        st.check_rank(dst)?;
        if dst == self.rank {
            return Err(SimError::SelfSend {
                rank: self.rank,
                label: tag.to_string(),
            });
        }
        let bytes = (payload.len() * ELEMENT_BYTES) as u64;
        st.ledger.record(tag, 1, bytes);
        st.push_event(self.rank, EventKind::Send, tag, Peer::Rank(dst), bytes);
        let key = ChannelKey {
            src: self.rank,
            dst,
            label: tag.label.clone(),
            dir: tag.dir,
        };
        st.channels.entry(key).or_default().push_back(Message {
            tag: tag.clone(),
            payload,
        });
        Ok(())
    }

    /// Receives the next message from `src` on the channel named by `tag`.
    pub async fn recv(&self, src: Rank, tag: &Tag) -> Result<Vec<f64>, SimError> {
        self.state.borrow().check_rank(src)?;
        let key = ChannelKey {
            src,
            dst: self.rank,
            label: tag.label.clone(),
            dir: tag.dir,
        };
        poll_fn(|_| {
            let mut st = self.state.borrow_mut();
            let msg = st.channels.get_mut(&key).and_then(|q| q.pop_front());
            match msg {
                Some(msg) => {
                    st.waiting.remove(&self.rank);
                    let bytes = (msg.payload.len() * ELEMENT_BYTES) as u64;
                    st.push_event(self.rank, EventKind::Recv, &msg.tag, Peer::Rank(src), bytes);
                    Poll::Ready(Ok(msg.payload))
                }
                None => {
                    st.waiting.insert(self.rank, format!("recv from rank {src} on `{tag}`"));
                    Poll::Pending
                }
            }
        })
        .await
    }

    async fn collective(
        &self,
        kind: CollectiveKind,
        group: &[Rank],
        tag: &Tag,
        payload: Vec<f64>,
    ) -> Result<Vec<f64>, SimError> {
        let id = self.state.borrow_mut().enter(self.rank, kind, group, tag, payload)?;
        poll_fn(|_| {
            let mut st = self.state.borrow_mut();
            match st.take_result(id, self.rank) {
                Some(out) => {
                    st.waiting.remove(&self.rank);
                    Poll::Ready(Ok(out))
                }
                None => {
                    st.waiting
                        .insert(self.rank, format!("{kind} on `{tag}` over {group:?}"));
                    Poll::Pending
                }
            }
        })
        .await
    }

    /// Every member receives `root`'s payload. Non-root members pass `None`.
    pub async fn broadcast(
        &self,
        group: &[Rank],
        root: Rank,
        tag: &Tag,
        payload: Option<Vec<f64>>,
    ) -> Result<Vec<f64>, SimError> {
        self.collective(
            CollectiveKind::Broadcast { root },
            group,
            tag,
            payload.unwrap_or_default(),
        )
        .await
    }

    /// Concatenation of every member's payload in group order.
    pub async fn all_gather(&self, group: &[Rank], tag: &Tag, payload: Vec<f64>) -> Result<Vec<f64>, SimError> {
        self.collective(CollectiveKind::AllGather, group, tag, payload).await
    }

    /// Elementwise sum, accumulated in group order.
    pub async fn all_reduce(&self, group: &[Rank], tag: &Tag, payload: Vec<f64>) -> Result<Vec<f64>, SimError> {
        self.collective(CollectiveKind::AllReduce, group, tag, payload).await
    }

    pub async fn barrier(&self, group: &[Rank], tag: &Tag) -> Result<(), SimError> {
        self.collective(CollectiveKind::Barrier, group, tag, Vec::new())
            .await
            .map(|_| ())
    }

    /// Appends a free-form annotation event to the trace.
    pub fn note(&self, label: &str) {
        self.state
            .borrow_mut()
            .push_event(self.rank, EventKind::Note, &Tag::plain(label), Peer::None, 0);
    }

    pub fn ledger_snapshot(&self) -> Result<TrafficLedger, SimError> {
        let st = self.state.borrow();
        if !st.slots.is_empty() {
            return Err(SimError::SnapshotWhileActive {
                pending: st.slots.len(),
            });
        }
        Ok(st.ledger.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type Script<'a> = RankScript<'a, Vec<f64>, SimError>;

    fn script<'a, F>(rank: Rank, f: F) -> (Rank, Script<'a>)
    where
        F: Future<Output = Result<Vec<f64>, SimError>> + 'a,
    {
        (rank, Box::pin(f))
    }

    #[test]
    fn p2p_delivers_payload_and_accounts_bytes() {
        let mut fabric = Fabric::new(2);
        let (c0, c1) = (fabric.comm(0), fabric.comm(1));
        let tag = Tag::plain("x");
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let expected = data.clone();
        let out = fabric
            .run(vec![
                script(0, async move {
                    c0.send(1, &Tag::plain("x"), data)?;
                    Ok(vec![])
                }),
                script(1, async move { c1.recv(0, &tag).await }),
            ])
            .unwrap();
        assert_eq!(out[1], expected);
        let ledger = fabric.ledger_snapshot().unwrap();
        assert_eq!(
            ledger.get("x", Direction::None),
            LedgerEntry {
                messages: 1,
                bytes: 24 * 8
            }
        );
    }

    #[test]
    fn per_channel_fifo_with_interleaving() {
        let mut fabric = Fabric::new(2);
        let (c0, c1) = (fabric.comm(0), fabric.comm(1));
        let out = fabric
            .run(vec![
                script(0, async move {
                    for i in 0..4 {
                        c0.send(1, &Tag::plain("a"), vec![i as f64])?;
                        c0.send(1, &Tag::plain("b"), vec![10.0 + i as f64])?;
                    }
                    Ok(vec![])
                }),
                script(1, async move {
                    let mut got = Vec::new();
                    // drain b first, then a: each channel must still be FIFO
                    for _ in 0..4 {
                        got.extend(c1.recv(0, &Tag::plain("b")).await?);
                    }
                    for _ in 0..4 {
                        got.extend(c1.recv(0, &Tag::plain("a")).await?);
                    }
                    Ok(got)
                }),
            ])
            .unwrap();
        assert_eq!(out[1], vec![10.0, 11.0, 12.0, 13.0, 0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn unmatched_recv_reports_deadlock() {
        let mut fabric = Fabric::new(2);
        let c1 = fabric.comm(1);
        let err = fabric
            .run(vec![
                script(0, async move { Ok(vec![]) }),
                script(1, async move { c1.recv(0, &Tag::plain("never")).await }),
            ])
            .unwrap_err();
        match err {
            SimError::Deadlock { waiting } => {
                assert_eq!(waiting.len(), 1);
                assert_eq!(waiting[0].0, 1);
                assert!(waiting[0].1.contains("never"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn broadcast_group_of_one_and_four() {
        let mut fabric = Fabric::new(4);
        let c = fabric.comm(2);
        let out = fabric
            .run(vec![script(2, async move {
                c.broadcast(&[2], 2, &Tag::plain("b1"), Some(vec![1.0, 2.0])).await
            })])
            .unwrap();
        assert_eq!(out[0], vec![1.0, 2.0]);
        assert!(fabric.ledger_snapshot().unwrap().is_empty());

        let group = vec![0, 1, 2, 3];
        let scripts = (0..4)
            .map(|r| {
                let c = fabric.comm(r);
                let g = group.clone();
                script(r, async move {
                    let payload = (r == 1).then(|| vec![7.0, 8.0, 9.0]);
                    c.broadcast(&g, 1, &Tag::plain("b4"), payload).await
                })
            })
            .collect();
        let out = fabric.run(scripts).unwrap();
        assert!(out.iter().all(|v| v == &vec![7.0, 8.0, 9.0]));
        assert_eq!(fabric.ledger_snapshot().unwrap().get("b4", Direction::None).messages, 3);
    }

    #[test]
    fn mismatched_groups_are_detected() {
        let mut fabric = Fabric::new(3);
        let (c0, c1) = (fabric.comm(0), fabric.comm(1));
        let err = fabric
            .run(vec![
                script(
                    0,
                    async move { c0.all_gather(&[0, 1], &Tag::plain("g"), vec![0.0]).await },
                ),
                script(
                    1,
                    async move { c1.all_gather(&[1, 2], &Tag::plain("g"), vec![1.0]).await },
                ),
            ])
            .unwrap_err();
        assert!(matches!(err, SimError::GroupMismatch { rank: 1, .. }));
    }

    #[test]
    fn disjoint_groups_may_share_a_label() {
        let mut fabric = Fabric::new(4);
        let scripts = (0..4)
            .map(|r| {
                let c = fabric.comm(r);
                let group = if r < 2 { vec![0, 1] } else { vec![2, 3] };
                script(r, async move {
                    c.all_reduce(&group, &Tag::plain("tp"), vec![r as f64]).await
                })
            })
            .collect();
        let out = fabric.run(scripts).unwrap();
        assert_eq!(out, vec![vec![1.0], vec![1.0], vec![5.0], vec![5.0]]);
    }

    #[test]
    fn all_gather_orders_by_member_index() {
        for group in [vec![0usize], vec![0, 1], vec![3, 1, 0, 2]] {
            let mut fabric = Fabric::new(4);
            let scripts = group
                .iter()
                .map(|&r| {
                    let c = fabric.comm(r);
                    let g = group.clone();
                    script(r, async move {
                        c.all_gather(&g, &Tag::plain("ag"), vec![r as f64, r as f64 + 0.5])
                            .await
                    })
                })
                .collect();
            let out = fabric.run(scripts).unwrap();
            let oracle: Vec<f64> = group.iter().flat_map(|&r| [r as f64, r as f64 + 0.5]).collect();
            assert!(out.iter().all(|v| v == &oracle));
        }
    }

    #[test]
    fn slices_gather_into_one_shard() {
        let mut fabric = Fabric::new(2);
        let slices = [vec![0.0, 1.0], vec![2.0, 3.0]];
        let scripts = (0..2)
            .map(|r| {
                let c = fabric.comm(r);
                let s = slices[r].clone();
                script(r, async move { c.all_gather(&[0, 1], &Tag::plain("ag"), s).await })
            })
            .collect();
        let out = fabric.run(scripts).unwrap();
        assert_eq!(out[0], vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(out[1], out[0]);
    }

    #[test]
    fn all_reduce_sums_and_checks_shapes() {
        let mut fabric = Fabric::new(3);
        let scripts = (0..3)
            .map(|r| {
                let c = fabric.comm(r);
                script(r, async move {
                    c.all_reduce(&[0, 1, 2], &Tag::plain("ar"), vec![r as f64 + 1.0]).await
                })
            })
            .collect();
        assert!(fabric.run(scripts).unwrap().iter().all(|v| v == &vec![6.0]));

        let mut fabric = Fabric::new(2);
        let scripts = (0..2)
            .map(|r| {
                let c = fabric.comm(r);
                script(r, async move {
                    c.all_reduce(&[0, 1], &Tag::plain("ar"), vec![0.0; r + 1]).await
                })
            })
            .collect();
        assert!(matches!(fabric.run(scripts), Err(SimError::ShapeMismatch { .. })));
    }

    #[test]
    fn missing_member_deadlocks() {
        let mut fabric = Fabric::new(2);
        let c0 = fabric.comm(0);
        let err = fabric
            .run(vec![
                script(
                    0,
                    async move { c0.all_reduce(&[0, 1], &Tag::plain("ar"), vec![1.0]).await },
                ),
                script(1, async move { Ok(vec![]) }),
            ])
            .unwrap_err();
        assert!(matches!(err, SimError::Deadlock { .. }));
    }

    #[test]
    fn snapshot_mid_collective_fails() {
        let mut fabric = Fabric::new(2);
        let (c0, c1) = (fabric.comm(0), fabric.comm(1));
        let out = fabric.run(vec![
            script(
                0,
                async move { c0.all_reduce(&[0, 1], &Tag::plain("ar"), vec![1.0]).await },
            ),
            script(1, async move {
                let snap = c1.ledger_snapshot();
                assert!(matches!(snap, Err(SimError::SnapshotWhileActive { pending: 1 })));
                c1.all_reduce(&[0, 1], &Tag::plain("ar"), vec![1.0]).await
            }),
        ]);
        assert!(out.is_ok());
        assert!(fabric.ledger_snapshot().is_ok());
    }

    fn noisy_world() -> (String, TrafficLedger) {
        let mut fabric = Fabric::new(4);
        let scripts = (0..4)
            .map(|r| {
                let c = fabric.comm(r);
                script(r, async move {
                    let v = vec![0.1 * r as f64, 1e-17, 3.0];
                    let s = c.all_reduce(&[0, 1, 2, 3], &Tag::plain("ar"), v).await?;
                    if r > 0 {
                        c.send(0, &Tag::fwd("p", r), s.clone())?;
                        Ok(s)
                    } else {
                        for src in 1..4 {
                            c.recv(src, &Tag::fwd("p", src)).await?;
                        }
                        Ok(s)
                    }
                })
            })
            .collect();
        fabric.run(scripts).unwrap();
        (fabric.trace_export().render(), fabric.ledger_snapshot().unwrap())
    }

    #[test]
    fn repeated_runs_are_identical() {
        let (t1, l1) = noisy_world();
        let (t2, l2) = noisy_world();
        assert_eq!(t1, t2);
        assert_eq!(l1, l2);
        assert!(t1
            .lines()
            .next()
            .unwrap()
            .starts_with("0 0 coll-enter ar [0,1,2,3] - 24"));
    }

    #[test]
    fn empty_fabric_has_empty_ledger() {
        let fabric = Fabric::new(1);
        assert!(fabric.ledger_snapshot().unwrap().is_empty());
        assert!(fabric.trace_export().events.is_empty());
    }

    #[test]
    fn self_send_rejected() {
        let fabric = Fabric::new(2);
        assert!(matches!(
            fabric.comm(0).send(0, &Tag::plain("x"), vec![]),
            Err(SimError::SelfSend { .. })
        ));
    }
}
