//! Pipeline schedules over the stage graph.
//!
//! Every (module, pipeline stage) pair is a node. Each node runs a 1F1B
//! program whose warmup depth is its longest-path distance to the sink. The
//! dispatch table is what falls out of running all programs against each
//! other with blocking, paired communication calls: a row is one tick, and a
//! communication call completes only in the tick where every peer it talks to
//! is sitting in the complementary call.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::grid::{placement_of, GridError, ModuleLayout, Placement};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedError {
    #[error("edge {0} references an undeclared module")]
    DanglingEdge(String),
    #[error("stage graph has a cycle through {0}")]
    CyclicGraph(String),
    #[error("stage graph must have exactly one sink, found {0:?}")]
    NoSingleSink(Vec<String>),
    #[error("infeasible schedule: {0}")]
    InfeasibleSchedule(String),
    #[error("edge {0} is not colocated")]
    NotColocated(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    /// Module-internal pipeline hop.
    P2p,
    /// Boundary between two modules.
    Nc,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::P2p => "p2p",
            EdgeKind::Nc => "NC",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageNode {
    pub module: String,
    pub pp: usize,
    /// Longest path, in edges, to the sink.
    pub distance: usize,
}

impl StageNode {
    pub fn label(&self) -> String {
        format!("{}.pp{}", self.module, self.pp)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageEdge {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
    /// Index into the boundary edge list for module-crossing edges.
    pub boundary: Option<usize>,
    pub placement: Option<Placement>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageGraph {
    pub nodes: Vec<StageNode>,
    pub edges: Vec<StageEdge>,
}

impl StageGraph {
    pub fn node_index(&self, module: &str, pp: usize) -> Option<usize> {
        self.nodes.iter().position(|n| n.module == module && n.pp == pp)
    }

    /// Incoming edges in declared order.
    pub fn in_edges(&self, node: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.to == node).map(|e| e.id).collect()
    }

    pub fn out_edges(&self, node: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.from == node).map(|e| e.id).collect()
    }

    pub fn sink(&self) -> usize {
        (0..self.nodes.len())
            .find(|&n| self.out_edges(n).is_empty())
            .expect("validated graph has a sink")
    }

    pub fn edge_label(&self, e: usize) -> String {
        let edge = &self.edges[e];
        format!("{}->{}", self.nodes[edge.from].label(), self.nodes[edge.to].label())
    }

    /// Subgraph of one module's nodes and internal edges.
    pub fn restrict_to(&self, module: &str) -> StageGraph {
        let keep: Vec<usize> = (0..self.nodes.len())
            .filter(|&n| self.nodes[n].module == module)
            .collect();
        let remap: BTreeMap<usize, usize> = keep.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let mut nodes: Vec<StageNode> = keep.iter().map(|&n| self.nodes[n].clone()).collect();
        let edges: Vec<StageEdge> = self
            .edges
            .iter()
            .filter(|e| remap.contains_key(&e.from) && remap.contains_key(&e.to))
            .enumerate()
            .map(|(id, e)| StageEdge {
                id,
                from: remap[&e.from],
                to: remap[&e.to],
                ..e.clone()
            })
            .collect();
        let last = nodes.iter().map(|n| n.pp).max().unwrap_or(0);
        for n in &mut nodes {
            n.distance = last - n.pp;
        }
        StageGraph { nodes, edges }
    }
}

/// Expands modules into pipeline-stage nodes. `edges` are `(source, dest)`
/// module names in declared order.
pub fn build_stage_graph(modules: &[ModuleLayout], edges: &[(String, String)]) -> Result<StageGraph, SchedError> {
    let mut nodes = Vec::new();
    let mut first = BTreeMap::new();
    let mut last = BTreeMap::new();
    let mut graph_edges = Vec::new();
    for m in modules {
        for pp in 0..m.pp {
            if pp > 0 {
                graph_edges.push(StageEdge {
                    id: graph_edges.len(),
                    from: nodes.len() - 1,
                    to: nodes.len(),
                    kind: EdgeKind::P2p,
                    boundary: None,
                    placement: None,
                });
            }
            if pp == 0 {
                first.insert(m.name.clone(), nodes.len());
            }
            last.insert(m.name.clone(), nodes.len());
            nodes.push(StageNode {
                module: m.name.clone(),
                pp,
                distance: 0,
            });
        }
    }
    let by_name: BTreeMap<&str, &ModuleLayout> = modules.iter().map(|m| (m.name.as_str(), m)).collect();
    for (b, (src, dst)) in edges.iter().enumerate() {
        let (Some(&from), Some(&to)) = (last.get(src), first.get(dst)) else {
            return Err(SchedError::DanglingEdge(format!("{src}->{dst}")));
        };
        let placement = placement_of(by_name[src.as_str()], by_name[dst.as_str()])?;
        graph_edges.push(StageEdge {
            id: graph_edges.len(),
            from,
            to,
            kind: EdgeKind::Nc,
            boundary: Some(b),
            placement: Some(placement),
        });
    }
    let mut graph = StageGraph {
        nodes,
        edges: graph_edges,
    };

    let sinks: Vec<usize> = (0..graph.nodes.len())
        .filter(|&n| graph.out_edges(n).is_empty())
        .collect();
    if sinks.len() != 1 {
        return Err(SchedError::NoSingleSink(
            sinks.iter().map(|&n| graph.nodes[n].label()).collect(),
        ));
    }

    // longest path to the sink, by reverse topological order
    let n = graph.nodes.len();
    let mut indeg = vec![0usize; n];
    for e in &graph.edges {
        indeg[e.to] += 1;
    }
    let mut order = Vec::with_capacity(n);
    let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    while let Some(v) = ready.pop() {
        order.push(v);
        for e in graph.out_edges(v) {
            let to = graph.edges[e].to;
            indeg[to] -= 1;
            if indeg[to] == 0 {
                ready.push(to);
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| indeg[i] > 0).expect("some node is on a cycle");
        return Err(SchedError::CyclicGraph(graph.nodes[stuck].label()));
    }
    for &v in order.iter().rev() {
        let d = graph
            .out_edges(v)
            .iter()
            .map(|&e| graph.nodes[graph.edges[e].to].distance + 1)
            .max()
            .unwrap_or(0);
        graph.nodes[v].distance = d;
    }
    Ok(graph)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pass {
    Fwd,
    Bwd,
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pass::Fwd => "F",
            Pass::Bwd => "B",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Send,
    Recv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CommOp {
    pub op: OpKind,
    pub pass: Pass,
    pub edge: usize,
    pub kind: EdgeKind,
    pub mb: usize,
}

impl CommOp {
    /// The op the peer on the other end of the edge must issue.
    pub fn complement(&self) -> CommOp {
        CommOp {
            op: match self.op {
                OpKind::Send => OpKind::Recv,
                OpKind::Recv => OpKind::Send,
            },
            ..*self
        }
    }
}

impl fmt::Display for CommOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.op {
            OpKind::Send => 's',
            OpKind::Recv => 'r',
        };
        write!(f, "{op}{}{}:{}@{}", self.pass, self.mb, self.kind, self.edge)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Call {
    Compute { pass: Pass, mb: usize },
    Comm(Vec<CommOp>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Warmup,
    Steady,
    Cooldown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeProgram {
    pub node: usize,
    pub calls: Vec<(Segment, Call)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleConfig {
    pub num_microbatches: usize,
}

fn ops(graph: &StageGraph, edges: &[usize], op: OpKind, pass: Pass, mb: usize) -> Vec<CommOp> {
    edges
        .iter()
        .map(|&e| CommOp {
            op,
            pass,
            edge: e,
            kind: graph.edges[e].kind,
            mb,
        })
        .collect()
}

/// Per-node 1F1B call lists.
pub fn node_programs(graph: &StageGraph, cfg: &ScheduleConfig) -> Result<Vec<NodeProgram>, SchedError> {
    let nmb = cfg.num_microbatches;
    if nmb < 1 {
        return Err(SchedError::InfeasibleSchedule(
            "num_microbatches must be at least 1".into(),
        ));
    }
    let mut out = Vec::new();
    for (n, node) in graph.nodes.iter().enumerate() {
        let ins = graph.in_edges(n);
        let outs = graph.out_edges(n);
        let warmup = node.distance.min(nmb);
        let steady = nmb - warmup;
        let mut calls = Vec::new();
        let mut push = |seg: Segment, call: Call| {
            if !matches!(&call, Call::Comm(v) if v.is_empty()) {
                calls.push((seg, call));
            }
        };
        let (mut f, mut b) = (0, 0);
        for _ in 0..warmup {
            push(
                Segment::Warmup,
                Call::Comm(ops(graph, &ins, OpKind::Recv, Pass::Fwd, f)),
            );
            push(Segment::Warmup, Call::Compute { pass: Pass::Fwd, mb: f });
            push(
                Segment::Warmup,
                Call::Comm(ops(graph, &outs, OpKind::Send, Pass::Fwd, f)),
            );
            f += 1;
        }
        if steady > 0 {
            push(
                Segment::Steady,
                Call::Comm(ops(graph, &ins, OpKind::Recv, Pass::Fwd, f)),
            );
        }
        for j in 0..steady {
            push(Segment::Steady, Call::Compute { pass: Pass::Fwd, mb: f });
            let mut c = ops(graph, &outs, OpKind::Send, Pass::Fwd, f);
            c.extend(ops(graph, &outs, OpKind::Recv, Pass::Bwd, b));
            push(Segment::Steady, Call::Comm(c));
            push(Segment::Steady, Call::Compute { pass: Pass::Bwd, mb: b });
            let mut c = ops(graph, &ins, OpKind::Send, Pass::Bwd, b);
            if j + 1 < steady {
                c.extend(ops(graph, &ins, OpKind::Recv, Pass::Fwd, f + 1));
            }
            push(Segment::Steady, Call::Comm(c));
            f += 1;
            b += 1;
        }
        for _ in 0..warmup {
            push(
                Segment::Cooldown,
                Call::Comm(ops(graph, &outs, OpKind::Recv, Pass::Bwd, b)),
            );
            push(Segment::Cooldown, Call::Compute { pass: Pass::Bwd, mb: b });
            push(
                Segment::Cooldown,
                Call::Comm(ops(graph, &ins, OpKind::Send, Pass::Bwd, b)),
            );
            b += 1;
        }
        out.push(NodeProgram { node: n, calls });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Cell {
    Empty,
    Compute { pass: Pass, mb: usize },
    Comm(Vec<CommOp>),
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Empty => f.write_str("."),
            Cell::Compute { pass, mb } => write!(f, "{pass}{mb}"),
            Cell::Comm(ops) => {
                let parts: Vec<String> = ops.iter().map(|o| o.to_string()).collect();
                f.write_str(&parts.join("+"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    /// Edge legend: `(id, label, kind)`.
    pub edges: Vec<(usize, String, EdgeKind)>,
    pub programs: Vec<NodeProgram>,
}

impl DispatchTable {
    pub fn render(&self) -> String {
        let mut grid: Vec<Vec<String>> = vec![std::iter::once("call".to_string())
            .chain(self.columns.iter().cloned())
            .collect()];
        for (i, row) in self.rows.iter().enumerate() {
            grid.push(
                std::iter::once(i.to_string())
                    .chain(row.iter().map(|c| c.to_string()))
                    .collect(),
            );
        }
        let ncols = grid[0].len();
        let widths: Vec<usize> = (0..ncols)
            .map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &grid {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        if !self.edges.is_empty() {
            let _ = writeln!(out);
            for (id, label, kind) in &self.edges {
                let _ = writeln!(out, "edge {id} {kind} {label}");
            }
        }
        out
    }

    /// Row in which node `n` issues its `i`-th call.
    pub fn call_rows(&self, n: usize) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r[n] != Cell::Empty)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Runs every node program against the others with blocking paired calls.
pub fn generate_1f1b_dispatch(graph: &StageGraph, cfg: &ScheduleConfig) -> Result<DispatchTable, SchedError> {
    let programs = node_programs(graph, cfg)?;
    let n = graph.nodes.len();
    let peer = |op: &CommOp, me: usize| {
        let e = &graph.edges[op.edge];
        if e.from == me {
            e.to
        } else {
            e.from
        }
    };
    let mut pc = vec![0usize; n];
    let mut rows = Vec::new();
    while (0..n).any(|i| pc[i] < programs[i].calls.len()) {
        let cur: Vec<Option<&Call>> = (0..n).map(|i| programs[i].calls.get(pc[i]).map(|(_, c)| c)).collect();
        let current = |i: usize| cur[i];
        // fixpoint: drop comm calls with an op whose peer is not ready to match it
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| matches!(current(i), Some(Call::Comm(_)))).collect();
        loop {
            let drop: Vec<usize> = ready
                .iter()
                .copied()
                .filter(|&i| {
                    let Some(Call::Comm(my_ops)) = current(i) else {
                        unreachable!()
                    };
                    my_ops.iter().any(|op| {
                        let p = peer(op, i);
                        !ready.contains(&p)
                            || !matches!(current(p), Some(Call::Comm(theirs)) if theirs.contains(&op.complement()))
                    })
                })
                .collect();
            if drop.is_empty() {
                break;
            }
            for i in drop {
                ready.remove(&i);
            }
        }
        let mut row = vec![Cell::Empty; n];
        let mut progressed = false;
        for i in 0..n {
            match current(i) {
                Some(Call::Compute { pass, mb }) => {
                    row[i] = Cell::Compute { pass: *pass, mb: *mb };
                }
                Some(Call::Comm(ops)) if ready.contains(&i) => {
                    row[i] = Cell::Comm(ops.clone());
                }
                _ => continue,
            }
            pc[i] += 1;
            progressed = true;
        }
        if !progressed {
            let waiting: Vec<String> = (0..n)
                .filter(|&i| pc[i] < programs[i].calls.len())
                .map(|i| format!("{} at call {}", graph.nodes[i].label(), pc[i]))
                .collect();
            return Err(SchedError::InfeasibleSchedule(format!(
                "no call can complete; waiting: {}",
                waiting.join(", ")
            )));
        }
        rows.push(row);
    }
    Ok(DispatchTable {
        columns: graph.nodes.iter().map(|n| n.label()).collect(),
        rows,
        edges: graph
            .edges
            .iter()
            .map(|e| (e.id, graph.edge_label(e.id), e.kind))
            .collect(),
        programs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Rule {
    JoinReadiness,
    EdgeIdentity,
    DoubleConsumption,
    Completeness,
    Ordering,
    KindMismatch,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::JoinReadiness => "join-readiness",
            Rule::EdgeIdentity => "edge-identity",
            Rule::DoubleConsumption => "double-consumption",
            Rule::Completeness => "completeness",
            Rule::Ordering => "ordering",
            Rule::KindMismatch => "kind-mismatch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub rule: Rule,
    pub row: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.row {
            Some(r) => write!(f, "{} at call {r}: {}", self.rule, self.detail),
            None => write!(f, "{}: {}", self.rule, self.detail),
        }
    }
}

/// Checks a table against the graph. Never fails; returns every violation.
pub fn validate_dispatch(table: &DispatchTable, graph: &StageGraph, nmb: usize) -> Vec<Violation> {
    let mut v = Vec::new();
    let mut flag = |rule, row, detail: String| v.push(Violation { rule, row, detail });
    let n = graph.nodes.len();
    let name = |i: usize| graph.nodes[i].label();
    // (node, op, pass, edge, mb) -> row
    let mut seen: BTreeMap<(usize, OpKind, Pass, usize, usize), usize> = BTreeMap::new();
    // (node, pass, mb) -> row
    let mut computed: BTreeMap<(usize, Pass, usize), usize> = BTreeMap::new();

    for (r, row) in table.rows.iter().enumerate() {
        if row.len() != n {
            flag(
                Rule::Completeness,
                Some(r),
                format!("row has {} cells for {n} nodes", row.len()),
            );
            continue;
        }
        for (i, cell) in row.iter().enumerate() {
            match cell {
                Cell::Empty => {}
                Cell::Compute { pass, mb } => {
                    if computed.insert((i, *pass, *mb), r).is_some() {
                        flag(
                            Rule::DoubleConsumption,
                            Some(r),
                            format!("{} computes {pass}{mb} twice", name(i)),
                        );
                    }
                    match pass {
                        Pass::Fwd => {
                            for e in graph.in_edges(i) {
                                if !seen.contains_key(&(i, OpKind::Recv, Pass::Fwd, e, *mb)) {
                                    flag(
                                        Rule::JoinReadiness,
                                        Some(r),
                                        format!(
                                            "{} computes F{mb} before receiving it over edge {e} ({})",
                                            name(i),
                                            graph.edge_label(e)
                                        ),
                                    );
                                }
                            }
                        }
                        Pass::Bwd => {
                            if !computed.contains_key(&(i, Pass::Fwd, *mb)) {
                                flag(
                                    Rule::Ordering,
                                    Some(r),
                                    format!("{} computes B{mb} before F{mb}", name(i)),
                                );
                            }
                            for e in graph.out_edges(i) {
                                if !seen.contains_key(&(i, OpKind::Recv, Pass::Bwd, e, *mb)) {
                                    flag(
                                        Rule::JoinReadiness,
                                        Some(r),
                                        format!(
                                            "{} computes B{mb} before receiving its gradient over edge {e}",
                                            name(i)
                                        ),
                                    );
                                }
                            }
                        }
                    }
                }
                Cell::Comm(ops) => {
                    for op in ops {
                        let Some(edge) = graph.edges.get(op.edge) else {
                            flag(
                                Rule::EdgeIdentity,
                                Some(r),
                                format!("{} uses unknown edge {}", name(i), op.edge),
                            );
                            continue;
                        };
                        if edge.kind != op.kind {
                            flag(
                                Rule::KindMismatch,
                                Some(r),
                                format!(
                                    "{} marks edge {} as {} but it is {}",
                                    name(i),
                                    op.edge,
                                    op.kind,
                                    edge.kind
                                ),
                            );
                        }
                        // which endpoint must issue this op
                        let owner = match (op.op, op.pass) {
                            (OpKind::Send, Pass::Fwd) | (OpKind::Recv, Pass::Bwd) => edge.from,
                            (OpKind::Recv, Pass::Fwd) | (OpKind::Send, Pass::Bwd) => edge.to,
                        };
                        if owner != i {
                            flag(
                                Rule::EdgeIdentity,
                                Some(r),
                                format!(
                                    "{} issues {op} on edge {} ({}) which it does not own in that direction",
                                    name(i),
                                    op.edge,
                                    graph.edge_label(op.edge)
                                ),
                            );
                            continue;
                        }
                        let key = (i, op.op, op.pass, op.edge, op.mb);
                        if seen.insert(key, r).is_some() {
                            flag(Rule::DoubleConsumption, Some(r), format!("{} repeats {op}", name(i)));
                        }
                        match (op.op, op.pass) {
                            (OpKind::Send, Pass::Fwd) => {
                                if !computed.contains_key(&(i, Pass::Fwd, op.mb)) {
                                    flag(
                                        Rule::Ordering,
                                        Some(r),
                                        format!("{} sends F{} before computing it", name(i), op.mb),
                                    );
                                }
                            }
                            (OpKind::Send, Pass::Bwd) => {
                                if !seen.contains_key(&(i, OpKind::Recv, Pass::Fwd, op.edge, op.mb)) {
                                    flag(
                                        Rule::EdgeIdentity,
                                        Some(r),
                                        format!(
                                            "{} returns gradient {} over edge {} that never delivered its forward",
                                            name(i),
                                            op.mb,
                                            op.edge
                                        ),
                                    );
                                }
                                if !computed.contains_key(&(i, Pass::Bwd, op.mb)) {
                                    flag(
                                        Rule::Ordering,
                                        Some(r),
                                        format!("{} sends B{} before computing it", name(i), op.mb),
                                    );
                                }
                            }
                            (OpKind::Recv, Pass::Bwd) => {
                                if !seen.contains_key(&(i, OpKind::Send, Pass::Fwd, op.edge, op.mb)) {
                                    flag(
                                        Rule::EdgeIdentity,
                                        Some(r),
                                        format!(
                                            "{} receives gradient {} over edge {} it never sent forward on",
                                            name(i),
                                            op.mb,
                                            op.edge
                                        ),
                                    );
                                }
                            }
                            (OpKind::Recv, Pass::Fwd) => {}
                        }
                        // the matching op must be issued by the peer in the same call
                        let peer = if edge.from == i { edge.to } else { edge.from };
                        let matched = matches!(&row[peer], Cell::Comm(theirs) if theirs.contains(&op.complement()));
                        if !matched {
                            flag(
                                Rule::Ordering,
                                Some(r),
                                format!(
                                    "{} issues {op} but {} does not issue the matching op in the same call",
                                    name(i),
                                    name(peer)
                                ),
                            );
                        }
                    }
                }
            }
        }
    }

    // completeness
    for mb in 0..nmb {
        for i in 0..n {
            for pass in [Pass::Fwd, Pass::Bwd] {
                if !computed.contains_key(&(i, pass, mb)) {
                    flag(
                        Rule::Completeness,
                        None,
                        format!("{} never computes {pass}{mb}", name(i)),
                    );
                }
            }
        }
        for e in &graph.edges {
            for (node, op, pass) in [
                (e.from, OpKind::Send, Pass::Fwd),
                (e.to, OpKind::Recv, Pass::Fwd),
                (e.to, OpKind::Send, Pass::Bwd),
                (e.from, OpKind::Recv, Pass::Bwd),
            ] {
                if !seen.contains_key(&(node, op, pass, e.id, mb)) {
                    flag(
                        Rule::Completeness,
                        None,
                        format!("{} never issues {op:?} {pass}{mb} on edge {}", name(node), e.id),
                    );
                }
            }
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PhaseStep {
    /// One encoder forward over the whole microbatch window.
    EncoderForward {
        encoder: String,
        mbs: Vec<usize>,
    },
    BridgeForward {
        boundary: usize,
        label: String,
        mb: usize,
    },
    OffloadUnload,
    OffloadSync,
    GradHandoff {
        boundary: usize,
        label: String,
        mb: usize,
    },
    EncoderBackward {
        encoder: String,
        mbs: Vec<usize>,
    },
}

impl fmt::Display for PhaseStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[usize]| v.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",");
        match self {
            PhaseStep::EncoderForward { encoder, mbs } => write!(f, "encoder-forward {encoder} mb=[{}]", list(mbs)),
            PhaseStep::BridgeForward { label, mb, .. } => write!(f, "bridge-forward {label} mb={mb}"),
            PhaseStep::OffloadUnload => f.write_str("offload-unload"),
            PhaseStep::OffloadSync => f.write_str("offload-sync"),
            PhaseStep::GradHandoff { label, mb, .. } => write!(f, "grad-handoff {label} mb={mb}"),
            PhaseStep::EncoderBackward { encoder, mbs } => write!(f, "encoder-backward {encoder} mb=[{}]", list(mbs)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhasePlan {
    pub phase1: Vec<PhaseStep>,
    /// LLM-only pipeline.
    pub llm: StageGraph,
    pub phase2: DispatchTable,
    pub phase3: Vec<PhaseStep>,
    pub offload: bool,
    /// Per LLM stage, the index of its first cooldown call, where reload starts.
    pub reload_at: Vec<Option<usize>>,
}

impl PhasePlan {
    pub fn render(&self) -> String {
        let mut out = String::from("phase 1\n");
        for s in &self.phase1 {
            let _ = writeln!(out, "  {s}");
        }
        out.push_str("phase 2\n");
        for line in self.phase2.render().lines() {
            if line.is_empty() {
                out.push('\n');
            } else {
                let _ = writeln!(out, "  {line}");
            }
        }
        if self.offload {
            for (stage, at) in self.reload_at.iter().enumerate() {
                match at {
                    Some(c) => {
                        let _ = writeln!(out, "  offload-reload {} at call {c}", self.llm.nodes[stage].label());
                    }
                    None => {
                        let _ = writeln!(out, "  offload-reload {} at phase end", self.llm.nodes[stage].label());
                    }
                }
            }
        }
        out.push_str("phase 3\n");
        for s in &self.phase3 {
            let _ = writeln!(out, "  {s}");
        }
        out
    }
}

/// Three-phase schedule for a graph whose boundary edges are all colocated.
pub fn generate_three_phase(
    graph: &StageGraph,
    llm_module: &str,
    encoders: &[String],
    cfg: &ScheduleConfig,
    offload: bool,
) -> Result<PhasePlan, SchedError> {
    let nmb = cfg.num_microbatches;
    if nmb < 1 {
        return Err(SchedError::InfeasibleSchedule(
            "num_microbatches must be at least 1".into(),
        ));
    }
    let boundaries: Vec<&StageEdge> = graph.edges.iter().filter(|e| e.boundary.is_some()).collect();
    for e in &boundaries {
        if e.placement != Some(Placement::Colocated) {
            return Err(SchedError::NotColocated(graph.edge_label(e.id)));
        }
    }
    let label = |e: &StageEdge| format!("{}->{}", graph.nodes[e.from].module, graph.nodes[e.to].module);
    let mbs: Vec<usize> = (0..nmb).collect();

    let mut phase1 = Vec::new();
    for enc in encoders {
        phase1.push(PhaseStep::EncoderForward {
            encoder: enc.clone(),
            mbs: mbs.clone(),
        });
    }
    for e in &boundaries {
        for mb in 0..nmb {
            phase1.push(PhaseStep::BridgeForward {
                boundary: e.boundary.expect("boundary"),
                label: label(e),
                mb,
            });
        }
    }
    if offload {
        phase1.push(PhaseStep::OffloadUnload);
    }

    let llm = graph.restrict_to(llm_module);
    let phase2 = generate_1f1b_dispatch(&llm, cfg)?;
    let reload_at = phase2
        .programs
        .iter()
        .map(|p| p.calls.iter().position(|(seg, _)| *seg == Segment::Cooldown))
        .collect();

    let mut phase3 = Vec::new();
    if offload {
        phase3.push(PhaseStep::OffloadSync);
    }
    for e in &boundaries {
        for mb in 0..nmb {
            phase3.push(PhaseStep::GradHandoff {
                boundary: e.boundary.expect("boundary"),
                label: label(e),
                mb,
            });
        }
    }
    for enc in encoders {
        phase3.push(PhaseStep::EncoderBackward {
            encoder: enc.clone(),
            mbs: mbs.clone(),
        });
    }
    Ok(PhasePlan {
        phase1,
        llm,
        phase2,
        phase3,
        offload,
        reload_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(name: &str, pp: usize, offset: usize) -> ModuleLayout {
        ModuleLayout::new(name, 1, 1, pp, 1, offset).unwrap()
    }

    /// Encoder 1 with two stages, encoder 2 with one, LLM with three.
    fn two_encoder_graph() -> StageGraph {
        let modules = [
            layout("encoder1", 2, 3),
            layout("encoder2", 1, 5),
            layout("language", 3, 0),
        ];
        let edges = [
            ("encoder1".to_string(), "language".to_string()),
            ("encoder2".to_string(), "language".to_string()),
        ];
        build_stage_graph(&modules, &edges).unwrap()
    }

    fn cfg(nmb: usize) -> ScheduleConfig {
        ScheduleConfig { num_microbatches: nmb }
    }

    #[test]
    fn linear_chain() {
        let g = build_stage_graph(&[layout("language", 3, 0)], &[]).unwrap();
        assert_eq!(g.nodes.len(), 3);
        assert_eq!(g.edges.len(), 2);
        assert!(g.edges.iter().all(|e| e.kind == EdgeKind::P2p));
        let d: Vec<usize> = g.nodes.iter().map(|n| n.distance).collect();
        assert_eq!(d, vec![2, 1, 0]);
    }

    #[test]
    fn two_encoder_graph_and_distances() {
        let g = two_encoder_graph();
        assert_eq!(g.nodes.len(), 6);
        let dist = |m: &str, pp| g.nodes[g.node_index(m, pp).unwrap()].distance;
        assert_eq!(dist("language", 2), 0);
        assert_eq!(dist("language", 1), 1);
        assert_eq!(dist("language", 0), 2);
        assert_eq!(dist("encoder1", 1), 3);
        assert_eq!(dist("encoder1", 0), 4);
        assert_eq!(dist("encoder2", 0), 3);
        let llm0 = g.node_index("language", 0).unwrap();
        let ins = g.in_edges(llm0);
        assert_eq!(ins.len(), 2);
        assert!(ins.iter().all(|&e| g.edges[e].kind == EdgeKind::Nc));
        assert_eq!(g.edges[ins[0]].from, g.node_index("encoder1", 1).unwrap());
        assert_eq!(g.edges[ins[1]].from, g.node_index("encoder2", 0).unwrap());
    }

    #[test]
    fn graph_errors() {
        let a = layout("a", 1, 0);
        let b = layout("b", 1, 1);
        let cyc = [("a".to_string(), "b".to_string()), ("b".to_string(), "a".to_string())];
        assert!(matches!(
            build_stage_graph(&[a.clone(), b.clone()], &cyc),
            Err(SchedError::NoSingleSink(_)) | Err(SchedError::CyclicGraph(_))
        ));
        let c = layout("c", 1, 2);
        let cyc3 = [
            ("a".to_string(), "b".to_string()),
            ("b".to_string(), "a".to_string()),
            ("b".to_string(), "c".to_string()),
        ];
        assert!(matches!(
            build_stage_graph(&[a.clone(), b.clone(), c], &cyc3),
            Err(SchedError::CyclicGraph(_))
        ));
        assert!(matches!(
            build_stage_graph(&[a], &[("a".to_string(), "zz".to_string())]),
            Err(SchedError::DanglingEdge(_))
        ));
    }

    #[test]
    fn single_stage_alternates() {
        let g = build_stage_graph(&[layout("language", 1, 0)], &[]).unwrap();
        let t = generate_1f1b_dispatch(&g, &cfg(2)).unwrap();
        let cells: Vec<String> = t.rows.iter().map(|r| r[0].to_string()).collect();
        assert_eq!(cells, vec!["F0", "B0", "F1", "B1"]);
        assert!(validate_dispatch(&t, &g, 2).is_empty());
        assert!(matches!(
            generate_1f1b_dispatch(&g, &cfg(0)),
            Err(SchedError::InfeasibleSchedule(_))
        ));
    }

    #[test]
    fn linear_chain_matches_standard_warmup() {
        let g = build_stage_graph(&[layout("language", 4, 0)], &[]).unwrap();
        let programs = node_programs(&g, &cfg(8)).unwrap();
        for (stage, p) in programs.iter().enumerate() {
            let warm = p
                .calls
                .iter()
                .filter(|(s, c)| *s == Segment::Warmup && matches!(c, Call::Compute { .. }))
                .count();
            assert_eq!(warm, 4 - 1 - stage);
        }
    }

    #[test]
    fn two_encoder_dispatch_structure() {
        let g = two_encoder_graph();
        let t = generate_1f1b_dispatch(&g, &cfg(4)).unwrap();
        assert_eq!(validate_dispatch(&t, &g, 4), vec![]);
        let first_send = |module: &str, pp| {
            let n = g.node_index(module, pp).unwrap();
            t.rows
                .iter()
                .find_map(|r| match &r[n] {
                    Cell::Comm(ops) => ops
                        .iter()
                        .find(|o| o.op == OpKind::Send && o.pass == Pass::Fwd)
                        .copied(),
                    _ => None,
                })
                .unwrap()
        };
        assert_eq!(first_send("encoder1", 0).kind, EdgeKind::P2p);
        assert_eq!(first_send("encoder1", 1).kind, EdgeKind::Nc);
        assert_eq!(first_send("encoder2", 0).kind, EdgeKind::Nc);
        // a paired steady-state call mixes edge kinds
        let llm1 = g.node_index("language", 1).unwrap();
        assert!(t
            .rows
            .iter()
            .any(|r| matches!(&r[llm1], Cell::Comm(ops) if ops.len() == 2)));
    }

    #[test]
    fn every_edge_and_microbatch_appears_once_each_way() {
        for nmb in [1, 2, 4, 8] {
            let g = two_encoder_graph();
            let t = generate_1f1b_dispatch(&g, &cfg(nmb)).unwrap();
            let mut count: BTreeMap<(OpKind, Pass, usize, usize), usize> = BTreeMap::new();
            for row in &t.rows {
                for cell in row {
                    if let Cell::Comm(ops) = cell {
                        for o in ops {
                            *count.entry((o.op, o.pass, o.edge, o.mb)).or_default() += 1;
                        }
                    }
                }
            }
            assert_eq!(count.len(), 4 * g.edges.len() * nmb);
            assert!(count.values().all(|&c| c == 1));
            assert!(validate_dispatch(&t, &g, nmb).is_empty(), "nmb={nmb}");
        }
    }

    #[test]
    fn join_violation_is_reported() {
        let g = two_encoder_graph();
        let mut t = generate_1f1b_dispatch(&g, &cfg(4)).unwrap();
        let llm0 = g.node_index("language", 0).unwrap();
        // drop encoder2's delivery of microbatch 0 from LLM0's receive
        let e2 = g.in_edges(llm0)[1];
        for row in &mut t.rows {
            if let Cell::Comm(ops) = &mut row[llm0] {
                ops.retain(|o| !(o.edge == e2 && o.pass == Pass::Fwd && o.mb == 0));
            }
        }
        let v = validate_dispatch(&t, &g, 4);
        assert!(v.iter().any(|x| x.rule == Rule::JoinReadiness
            && x.detail.contains("F0")
            && x.detail.contains(&format!("edge {e2}"))));
    }

    #[test]
    fn wrong_gradient_edge_is_reported() {
        let g = two_encoder_graph();
        let mut t = generate_1f1b_dispatch(&g, &cfg(4)).unwrap();
        let llm0 = g.node_index("language", 0).unwrap();
        let (e1, e2) = (g.in_edges(llm0)[0], g.in_edges(llm0)[1]);
        let mut done = false;
        for row in &mut t.rows {
            if let Cell::Comm(ops) = &mut row[llm0] {
                for o in ops.iter_mut() {
                    if !done && o.op == OpKind::Send && o.pass == Pass::Bwd && o.edge == e2 {
                        o.edge = e1;
                        done = true;
                    }
                }
            }
        }
        assert!(done);
        let v = validate_dispatch(&t, &g, 4);
        assert!(v.iter().any(|x| x.rule == Rule::DoubleConsumption));
        assert!(v.iter().any(|x| x.rule == Rule::Completeness));
    }

    #[test]
    fn render_is_a_grid() {
        let g = build_stage_graph(&[layout("language", 2, 0)], &[]).unwrap();
        let t = generate_1f1b_dispatch(&g, &cfg(1)).unwrap();
        let text = t.render();
        assert!(text.starts_with("call  language.pp0  language.pp1\n"));
        assert!(text.contains("sF0:p2p@0"));
        assert_eq!(text, generate_1f1b_dispatch(&g, &cfg(1)).unwrap().render());
        let empty = DispatchTable {
            columns: vec![],
            rows: vec![],
            edges: vec![],
            programs: vec![],
        };
        assert_eq!(empty.render(), "call\n");
    }

    #[test]
    fn three_phase_layout() {
        let enc = ModuleLayout::new("images", 1, 1, 1, 4, 0).unwrap();
        let llm = ModuleLayout::new("language", 1, 1, 2, 2, 0).unwrap();
        let g = build_stage_graph(&[enc, llm], &[("images".into(), "language".into())]).unwrap();
        let p = generate_three_phase(&g, "language", &["images".to_string()], &cfg(4), true).unwrap();
        assert_eq!(p.phase1.len(), 1 + 4 + 1);
        assert_eq!(p.phase1.last(), Some(&PhaseStep::OffloadUnload));
        assert_eq!(p.phase3[0], PhaseStep::OffloadSync);
        assert!(validate_dispatch(&p.phase2, &p.llm, 4).is_empty());
        let computes = p
            .phase2
            .rows
            .iter()
            .flatten()
            .filter(|c| matches!(c, Cell::Compute { .. }))
            .count();
        assert_eq!(computes, 2 * 2 * 4);
        assert_eq!(p.reload_at.len(), 2);
        assert!(p.reload_at[0].is_some());

        let one = generate_three_phase(&g, "language", &["images".to_string()], &cfg(1), false).unwrap();
        assert_eq!(
            one.phase1,
            vec![
                PhaseStep::EncoderForward {
                    encoder: "images".into(),
                    mbs: vec![0]
                },
                PhaseStep::BridgeForward {
                    boundary: 0,
                    label: "images->language".into(),
                    mb: 0
                },
            ]
        );

        let apart = ModuleLayout::new("images", 1, 1, 1, 4, 4).unwrap();
        let llm = ModuleLayout::new("language", 1, 1, 2, 2, 0).unwrap();
        let g = build_stage_graph(&[apart, llm], &[("images".into(), "language".into())]).unwrap();
        assert!(matches!(
            generate_three_phase(&g, "language", &["images".to_string()], &cfg(4), false),
            Err(SchedError::NotColocated(_))
        ));
    }
}
