//! Sharded training steps on the simulated fabric.
//!
//! Each rank owns one worker per module it belongs to. A worker keeps only
//! its TP slice of each parameter for its pipeline stage. Non-colocated runs
//! execute the per-node 1F1B programs from the dispatch table; colocated runs
//! execute the three-phase plan. Either way a step ends with a gradient
//! all-reduce over each module's DP x CP group and an SGD update.

use std::collections::BTreeMap;
use std::ops::Range;
use std::rc::Rc;

use thiserror::Error;

use crate::bridge::{plan_bridge, BridgeEndpoint, BridgeError, BridgePlan, ShardedTensor};
use crate::config::{ConfigError, ExecutionMode, ExperimentConfig};
use crate::grid::{BatchInterval, GridCoord, GridError, ModuleLayout, Rank};
use crate::model::{
    assemble_param, layer_name, shard_param, ModelError, ParamKind, ParamSet, TinyModel, TrainBatch, TrainFlags,
    LANGUAGE,
};
use crate::oracle::StepState;
use crate::sched::{
    build_stage_graph, generate_1f1b_dispatch, generate_three_phase, validate_dispatch, Call, CommOp, DispatchTable,
    NodeProgram, OpKind, Pass, PhasePlan, PhaseStep, SchedError, ScheduleConfig, StageGraph,
};
use crate::simnet::{Comm, Fabric, RankScript, SimError, Tag};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("bridge: {0}")]
    Bridge(#[from] BridgeError),
    #[error("simnet: {0}")]
    Sim(#[from] SimError),
    #[error("sched: {0}")]
    Sched(#[from] SchedError),
    #[error("grid: {0}")]
    Grid(#[from] GridError),
    #[error("sched: generated dispatch table has violations: {}", .0.join("; "))]
    InvalidDispatch(Vec<String>),
    #[error("engine: replicas of {0} diverged")]
    ReplicaDivergence(String),
    #[error("engine: rank {rank} has no {what} for microbatch {mb}")]
    MissingInput { rank: Rank, what: String, mb: usize },
}

/// Deliberate corruption used to check that parity catches routing bugs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    /// Reverses the sample order of the boundary gradient that the first DP
    /// shard of `encoder` receives.
    PermuteBoundaryGrad { encoder: String },
}

fn shard_samples(bmb: usize, dp: usize, dp_idx: usize, mb: usize) -> Range<usize> {
    let n = bmb / dp;
    let s = mb * bmb + dp_idx * n;
    s..s + n
}

async fn reduce(comm: &Comm, group: &[Rank], tag: &Tag, m: Matrix) -> Result<Matrix, SimError> {
    if group.len() == 1 {
        return Ok(m);
    }
    let (r, c) = m.shape();
    Ok(Matrix::from_vec(
        r,
        c,
        comm.all_reduce(group, tag, m.into_data()).await?,
    ))
}

/// Splits `m` into consecutive row blocks of `rows` each.
fn split_rows(m: &Matrix, rows: usize) -> Vec<Matrix> {
    (0..m.rows() / rows)
        .map(|i| m.slice_rows(i * rows..(i + 1) * rows))
        .collect()
}

fn take(map: &mut BTreeMap<usize, Matrix>, mb: usize, rank: Rank, what: &str) -> Result<Matrix, EngineError> {
    map.remove(&mb).ok_or_else(|| EngineError::MissingInput {
        rank,
        what: what.to_string(),
        mb,
    })
}

struct Ctx<'a> {
    model: &'a TinyModel,
    flags: &'a TrainFlags,
    batch: &'a TrainBatch,
    graph: &'a StageGraph,
    programs: &'a [NodeProgram],
    phase: Option<&'a PhasePlan>,
    mode: ExecutionMode,
    bmb: usize,
    world: usize,
    fault: Option<&'a Fault>,
}

impl Ctx<'_> {
    fn norm(&self) -> f64 {
        let s = &self.model.spec;
        1.0 / (self.batch.samples * s.seq_len * s.d_h) as f64
    }
}

#[derive(Default)]
struct EncSaved {
    x: Option<Matrix>,
    a1: Option<Matrix>,
    h: Option<Matrix>,
}

struct EncWorker {
    k: usize,
    name: String,
    layout: ModuleLayout,
    coord: GridCoord,
    w1: Option<Matrix>,
    w2: Option<Matrix>,
    g1: Option<Matrix>,
    g2: Option<Matrix>,
    saved: BTreeMap<usize, EncSaved>,
    in_fwd: BTreeMap<usize, Matrix>,
    out_fwd: BTreeMap<usize, Matrix>,
    in_bwd: BTreeMap<usize, Matrix>,
    out_bwd: BTreeMap<usize, Matrix>,
}

impl EncWorker {
    fn is_last(&self) -> bool {
        self.coord.pp + 1 == self.layout.pp
    }

    fn rows_per_mb(&self, ctx: &Ctx<'_>) -> usize {
        ctx.bmb / self.layout.dp * ctx.model.spec.vision_tokens
    }

    fn stage_peer(&self, delta: isize) -> Rank {
        let mut c = self.coord;
        c.pp = (c.pp as isize + delta) as usize;
        self.layout.rank_of_coord(c).expect("peer stage exists")
    }

    fn p2p_label(&self) -> String {
        format!("{}.p2p", self.name)
    }

    fn out_shard(&mut self, ctx: &Ctx<'_>, mb: usize, rank: Rank) -> Result<ShardedTensor, EngineError> {
        let p = take(&mut self.out_fwd, mb, rank, "encoder output")?;
        let n = ctx.bmb / self.layout.dp;
        let iv = BatchInterval::new(self.coord.dp * n, n);
        Ok(ShardedTensor::new(iv, ctx.model.boundary_width(), p.into_data())?)
    }

    fn accept_grad(&mut self, ctx: &Ctx<'_>, mb: usize, g: ShardedTensor) {
        let sv = ctx.model.spec.vision_tokens;
        let mut m = Matrix::from_vec(g.interval.len * sv, ctx.model.spec.d_h, g.payload);
        if let Some(Fault::PermuteBoundaryGrad { encoder }) = ctx.fault {
            if *encoder == self.name && self.coord.dp == 0 {
                let blocks: Vec<Matrix> = split_rows(&m, sv).into_iter().rev().collect();
                m = Matrix::vstack(&blocks);
            }
        }
        self.in_bwd.insert(mb, m);
    }

    /// Forward over a window of microbatches as one batched computation.
    async fn forward(&mut self, comm: &Comm, ctx: &Ctx<'_>, mbs: &[usize]) -> Result<(), EngineError> {
        let s = &ctx.model.spec;
        let key = mbs[0];
        let mut saved = EncSaved::default();
        let h = if let Some(w1) = &self.w1 {
            let parts: Vec<Matrix> = mbs
                .iter()
                .map(|&mb| {
                    let samples = shard_samples(ctx.bmb, self.layout.dp, self.coord.dp, mb);
                    ctx.batch.vision_rows(self.k, samples, s.vision_tokens)
                })
                .collect();
            let x = Matrix::vstack(&parts);
            let a1 = x.matmul(w1);
            let h = s.activation.apply(&a1);
            saved.x = Some(x);
            saved.a1 = Some(a1);
            h
        } else {
            let mut parts = Vec::new();
            for &mb in mbs {
                parts.push(take(&mut self.in_fwd, mb, comm.rank(), "encoder activation")?);
            }
            Matrix::vstack(&parts)
        };
        let out = if let Some(w2) = &self.w2 {
            let group = self.layout.tp_group(self.coord);
            let tag = Tag::fwd(format!("{}.tp", self.name), key);
            let p = reduce(comm, &group, &tag, h.matmul(w2)).await?;
            saved.h = Some(h);
            p
        } else {
            h
        };
        for (mb, part) in mbs.iter().zip(split_rows(&out, self.rows_per_mb(ctx))) {
            self.out_fwd.insert(*mb, part);
        }
        self.saved.insert(key, saved);
        Ok(())
    }

    async fn backward(&mut self, comm: &Comm, ctx: &Ctx<'_>, mbs: &[usize]) -> Result<(), EngineError> {
        let act = ctx.model.spec.activation;
        let key = mbs[0];
        let saved = self.saved.remove(&key).ok_or(EngineError::MissingInput {
            rank: comm.rank(),
            what: "encoder forward record".into(),
            mb: key,
        })?;
        let mut parts = Vec::new();
        for &mb in mbs {
            parts.push(take(&mut self.in_bwd, mb, comm.rank(), "encoder gradient")?);
        }
        let upstream = Matrix::vstack(&parts);
        let dh = if let Some(w2) = &self.w2 {
            let h = saved.h.as_ref().expect("saved with w2");
            self.g2
                .as_mut()
                .expect("grad with w2")
                .add_assign(&h.t_matmul(&upstream));
            upstream.matmul_t(w2)
        } else {
            upstream
        };
        if self.w1.is_some() {
            let (x, a1) = (saved.x.as_ref().expect("saved"), saved.a1.as_ref().expect("saved"));
            let da1 = act.backprop(a1, &dh);
            self.g1.as_mut().expect("grad with w1").add_assign(&x.t_matmul(&da1));
        } else {
            for (mb, part) in mbs.iter().zip(split_rows(&dh, self.rows_per_mb(ctx))) {
                self.out_bwd.insert(*mb, part);
            }
        }
        Ok(())
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix, &mut Matrix)> {
        let mut v = Vec::new();
        if let (Some(w), Some(g)) = (self.w1.as_mut(), self.g1.as_mut()) {
            v.push((format!("{}.w1", self.name), w, g));
        }
        if let (Some(w), Some(g)) = (self.w2.as_mut(), self.g2.as_mut()) {
            v.push((format!("{}.w2", self.name), w, g));
        }
        v
    }
}

type LayerSaved = (Matrix, Matrix, Matrix);

struct LlmWorker {
    layout: ModuleLayout,
    coord: GridCoord,
    layers: Range<usize>,
    wa: Vec<Matrix>,
    wb: Vec<Matrix>,
    ga: Vec<Matrix>,
    gb: Vec<Matrix>,
    saved: BTreeMap<usize, Vec<LayerSaved>>,
    vision_in: BTreeMap<(usize, usize), Matrix>,
    vision_grad: BTreeMap<(usize, usize), ShardedTensor>,
    in_fwd: BTreeMap<usize, Matrix>,
    out_fwd: BTreeMap<usize, Matrix>,
    in_bwd: BTreeMap<usize, Matrix>,
    out_bwd: BTreeMap<usize, Matrix>,
    loss: f64,
}

impl LlmWorker {
    fn is_last(&self) -> bool {
        self.coord.pp + 1 == self.layout.pp
    }

    fn positions(&self, ctx: &Ctx<'_>) -> Range<usize> {
        let w = ctx.model.spec.seq_len / self.layout.cp;
        self.coord.cp * w..(self.coord.cp + 1) * w
    }

    fn samples(&self, ctx: &Ctx<'_>, mb: usize) -> Range<usize> {
        shard_samples(ctx.bmb, self.layout.dp, self.coord.dp, mb)
    }

    fn stage_peer(&self, delta: isize) -> Rank {
        let mut c = self.coord;
        c.pp = (c.pp as isize + delta) as usize;
        self.layout.rank_of_coord(c).expect("peer stage exists")
    }

    fn accept_vision(&mut self, ctx: &Ctx<'_>, k: usize, mb: usize, t: ShardedTensor) {
        let rows = t.interval.len * ctx.model.spec.vision_tokens;
        self.vision_in
            .insert((k, mb), Matrix::from_vec(rows, ctx.model.spec.d_h, t.payload));
    }

    async fn forward(&mut self, comm: &Comm, ctx: &Ctx<'_>, mb: usize) -> Result<(), EngineError> {
        let model = ctx.model;
        let s = &model.spec;
        let n = ctx.bmb / self.layout.dp;
        let pos = self.positions(ctx);
        let samples = self.samples(ctx, mb);
        let mut z = if self.coord.pp == 0 {
            let mut vision = Vec::new();
            for k in 0..model.encoders.len() {
                vision.push(self.vision_in.remove(&(k, mb)).ok_or(EngineError::MissingInput {
                    rank: comm.rank(),
                    what: format!("vision tokens of {}", model.encoders[k]),
                    mb,
                })?);
            }
            let text = ctx.batch.text_rows(samples.clone(), model.text_tokens());
            model.assemble_tokens(&vision, &text, n, pos.clone())
        } else {
            take(&mut self.in_fwd, mb, comm.rank(), "stage input")?
        };
        let group = self.layout.tp_group(self.coord);
        let tag = Tag::fwd(format!("{LANGUAGE}.tp"), mb);
        let mut saved = Vec::new();
        for i in 0..self.layers.len() {
            let a = z.matmul(&self.wa[i]);
            let u = s.activation.apply(&a);
            let next = reduce(comm, &group, &tag, u.matmul(&self.wb[i])).await?;
            saved.push((z, a, u));
            z = next;
        }
        self.saved.insert(mb, saved);
        if self.is_last() {
            let target = ctx.batch.target_rows(samples, s.seq_len);
            let y = model.target_slice(&target, n, pos);
            let err = z.zip_map(&y, |a, b| a - b);
            let norm = ctx.norm();
            if self.coord.tp == 0 {
                self.loss += err.sum_sq() * norm;
            }
            self.in_bwd.insert(mb, err.map(|e| 2.0 * e * norm));
        } else {
            self.out_fwd.insert(mb, z);
        }
        Ok(())
    }

    async fn backward(&mut self, comm: &Comm, ctx: &Ctx<'_>, mb: usize) -> Result<(), EngineError> {
        let model = ctx.model;
        let act = model.spec.activation;
        let mut dz = take(&mut self.in_bwd, mb, comm.rank(), "output gradient")?;
        let saved = self.saved.remove(&mb).ok_or(EngineError::MissingInput {
            rank: comm.rank(),
            what: "stage forward record".into(),
            mb,
        })?;
        let group = self.layout.tp_group(self.coord);
        let tag = Tag::bwd(format!("{LANGUAGE}.tp"), mb);
        for (i, (zin, a, u)) in saved.iter().enumerate().rev() {
            self.gb[i].add_assign(&u.t_matmul(&dz));
            let da = act.backprop(a, &dz.matmul_t(&self.wb[i]));
            self.ga[i].add_assign(&zin.t_matmul(&da));
            dz = reduce(comm, &group, &tag, da.matmul_t(&self.wa[i])).await?;
        }
        if self.coord.pp > 0 {
            self.out_bwd.insert(mb, dz);
            return Ok(());
        }
        // vision-token gradients: each CP rank holds its own positions; sum them
        let n = ctx.bmb / self.layout.dp;
        let parts = model.split_vision_grads(&dz, n, self.positions(ctx));
        let rows = parts[0].rows();
        let cp_group = self.layout.cp_group(self.coord);
        let full = reduce(
            comm,
            &cp_group,
            &Tag::bwd(format!("{LANGUAGE}.cp"), mb),
            Matrix::vstack(&parts),
        )
        .await?;
        let iv = BatchInterval::new(self.coord.dp * n, n);
        for (k, g) in split_rows(&full, rows).into_iter().enumerate() {
            let t = ShardedTensor::new(iv, model.boundary_width(), g.into_data())?;
            self.vision_grad.insert((k, mb), t);
        }
        Ok(())
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix, &mut Matrix)> {
        let mut v = Vec::new();
        let layers = self.layers.clone();
        let (wa, ga) = (self.wa.iter_mut(), self.ga.iter_mut());
        for (l, (w, g)) in layers.clone().zip(wa.zip(ga)) {
            v.push((layer_name(l, "wa"), w, g));
        }
        for (l, (w, g)) in layers.zip(self.wb.iter_mut().zip(self.gb.iter_mut())) {
            v.push((layer_name(l, "wb"), w, g));
        }
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }
}

struct RankState {
    rank: Rank,
    enc: Vec<Option<EncWorker>>,
    llm: Option<LlmWorker>,
    bridges: Vec<Option<BridgeEndpoint>>,
}

impl RankState {
    fn node(&self, graph: &StageGraph) -> Option<usize> {
        if let Some(w) = self.enc.iter().flatten().next() {
            return graph.node_index(&w.name, w.coord.pp);
        }
        self.llm.as_ref().and_then(|w| graph.node_index(LANGUAGE, w.coord.pp))
    }

    fn enc_mut(&mut self, k: usize) -> &mut EncWorker {
        self.enc[k].as_mut().expect("rank holds this encoder")
    }

    fn llm_mut(&mut self) -> &mut LlmWorker {
        self.llm.as_mut().expect("rank holds the language module")
    }

    fn bridge(&mut self, b: usize) -> &mut BridgeEndpoint {
        self.bridges[b].as_mut().expect("rank takes part in the edge")
    }

    async fn compute(
        &mut self,
        comm: &Comm,
        ctx: &Ctx<'_>,
        module: &str,
        pass: Pass,
        mb: usize,
    ) -> Result<(), EngineError> {
        if module == LANGUAGE {
            let w = self.llm_mut();
            match pass {
                Pass::Fwd => w.forward(comm, ctx, mb).await,
                Pass::Bwd => w.backward(comm, ctx, mb).await,
            }
        } else {
            let k = ctx
                .model
                .encoders
                .iter()
                .position(|e| e == module)
                .expect("known encoder");
            let w = self.enc_mut(k);
            match pass {
                Pass::Fwd => w.forward(comm, ctx, &[mb]).await,
                Pass::Bwd => w.backward(comm, ctx, &[mb]).await,
            }
        }
    }

    async fn comm_op(&mut self, comm: &Comm, ctx: &Ctx<'_>, op: &CommOp) -> Result<(), EngineError> {
        let edge = &ctx.graph.edges[op.edge];
        let module = ctx.graph.nodes[edge.from].module.clone();
        let mb = op.mb;
        let rank = self.rank;
        if let Some(b) = edge.boundary {
            let k = b;
            match (op.op, op.pass) {
                (OpKind::Send, Pass::Fwd) => {
                    let shard = self.enc_mut(k).out_shard(ctx, mb, rank)?;
                    self.bridge(b).forward(comm, Some(&shard), mb).await?;
                }
                (OpKind::Recv, Pass::Fwd) => {
                    let t = self.bridge(b).forward(comm, None, mb).await?.expect("destination rank");
                    self.llm_mut().accept_vision(ctx, k, mb, t);
                }
                (OpKind::Send, Pass::Bwd) => {
                    let g = self
                        .llm_mut()
                        .vision_grad
                        .remove(&(k, mb))
                        .ok_or(EngineError::MissingInput {
                            rank,
                            what: "vision gradient".into(),
                            mb,
                        })?;
                    self.bridge(b).backward(comm, Some(&g), mb).await?;
                }
                (OpKind::Recv, Pass::Bwd) => {
                    let g = self.bridge(b).backward(comm, None, mb).await?.expect("source rank");
                    self.enc_mut(k).accept_grad(ctx, mb, g);
                }
            }
            return Ok(());
        }
        let label = format!("{module}.p2p");
        if module == LANGUAGE {
            let w = self.llm_mut();
            match (op.op, op.pass) {
                (OpKind::Send, Pass::Fwd) => {
                    let z = take(&mut w.out_fwd, mb, rank, "stage output")?;
                    comm.send(w.stage_peer(1), &Tag::fwd(label, mb), z.into_data())?;
                }
                (OpKind::Recv, Pass::Fwd) => {
                    let (r, c) = (ctx.bmb / w.layout.dp * w.positions(ctx).len(), ctx.model.spec.d_h);
                    let data = comm.recv(w.stage_peer(-1), &Tag::fwd(label, mb)).await?;
                    w.in_fwd.insert(mb, Matrix::from_vec(r, c, data));
                }
                (OpKind::Send, Pass::Bwd) => {
                    let g = take(&mut w.out_bwd, mb, rank, "input gradient")?;
                    comm.send(w.stage_peer(-1), &Tag::bwd(label, mb), g.into_data())?;
                }
                (OpKind::Recv, Pass::Bwd) => {
                    let (r, c) = (ctx.bmb / w.layout.dp * w.positions(ctx).len(), ctx.model.spec.d_h);
                    let data = comm.recv(w.stage_peer(1), &Tag::bwd(label, mb)).await?;
                    w.in_bwd.insert(mb, Matrix::from_vec(r, c, data));
                }
            }
        } else {
            let k = ctx
                .model
                .encoders
                .iter()
                .position(|e| *e == module)
                .expect("known encoder");
            enc_p2p(self.enc_mut(k), comm, ctx, op.op, op.pass, mb).await?;
        }
        Ok(())
    }

    async fn run_nc(&mut self, comm: &Comm, ctx: &Ctx<'_>) -> Result<(), EngineError> {
        let Some(node) = self.node(ctx.graph) else {
            return Ok(());
        };
        let module = ctx.graph.nodes[node].module.clone();
        for (_, call) in &ctx.programs[node].calls {
            match call {
                Call::Compute { pass, mb } => self.compute(comm, ctx, &module, *pass, *mb).await?,
                Call::Comm(ops) => {
                    for op in ops.iter().filter(|o| o.op == OpKind::Send) {
                        self.comm_op(comm, ctx, op).await?;
                    }
                    for op in ops.iter().filter(|o| o.op == OpKind::Recv) {
                        self.comm_op(comm, ctx, op).await?;
                    }
                }
            }
        }
        Ok(())
    }

    async fn run_colocated(&mut self, comm: &Comm, ctx: &Ctx<'_>) -> Result<(), EngineError> {
        let plan = ctx.phase.expect("colocated runs carry a phase plan");
        let everyone: Vec<Rank> = (0..ctx.world).collect();
        let sync = Tag::plain("phase.sync");
        let enc_index = |name: &str| {
            ctx.model
                .encoders
                .iter()
                .position(|e| e == name)
                .expect("known encoder")
        };

        for step in &plan.phase1 {
            match step {
                PhaseStep::EncoderForward { encoder, mbs } => {
                    let k = enc_index(encoder);
                    if let Some(w) = self.enc[k].as_mut() {
                        if w.coord.pp > 0 {
                            for &mb in mbs {
                                enc_p2p(w, comm, ctx, OpKind::Recv, Pass::Fwd, mb).await?;
                            }
                        }
                        w.forward(comm, ctx, mbs).await?;
                        if !w.is_last() {
                            for &mb in mbs {
                                enc_p2p(w, comm, ctx, OpKind::Send, Pass::Fwd, mb).await?;
                            }
                        }
                    }
                }
                PhaseStep::BridgeForward { boundary, mb, .. } => {
                    let (b, mb) = (*boundary, *mb);
                    if self.bridges[b].is_none() {
                        continue;
                    }
                    let input = match self.enc[b].as_mut() {
                        Some(w) if w.is_last() => Some(w.out_shard(ctx, mb, self.rank)?),
                        _ => None,
                    };
                    if let Some(t) = self.bridge(b).forward(comm, input.as_ref(), mb).await? {
                        self.llm_mut().accept_vision(ctx, b, mb, t);
                    }
                }
                _ => {}
            }
        }
        comm.barrier(&everyone, &sync).await?;
        if plan.offload {
            comm.note("offload-unload");
        }

        comm.note("phase2-begin");
        if let Some(w) = self.llm.as_ref() {
            let stage = w.coord.pp;
            let reload = plan.reload_at[stage];
            for (i, (_, call)) in plan.phase2.programs[stage].calls.iter().enumerate() {
                if plan.offload && reload == Some(i) {
                    comm.note("offload-reload");
                }
                match call {
                    Call::Compute { pass, mb } => self.compute(comm, ctx, LANGUAGE, *pass, *mb).await?,
                    Call::Comm(ops) => {
                        for op in ops.iter().filter(|o| o.op == OpKind::Send) {
                            self.llm_p2p(comm, ctx, op).await?;
                        }
                        for op in ops.iter().filter(|o| o.op == OpKind::Recv) {
                            self.llm_p2p(comm, ctx, op).await?;
                        }
                    }
                }
            }
            if plan.offload && reload.is_none() {
                comm.note("offload-reload");
            }
        }
        comm.note("phase2-end");
        // the reload must be complete before any rank enters phase 3
        if plan.phase3.contains(&PhaseStep::OffloadSync) {
            comm.note("offload-sync");
        }
        comm.barrier(&everyone, &sync).await?;

        for step in &plan.phase3 {
            match step {
                PhaseStep::GradHandoff { boundary, mb, .. } => {
                    let (b, mb) = (*boundary, *mb);
                    if self.bridges[b].is_none() {
                        continue;
                    }
                    let grad = self.llm.as_mut().and_then(|w| w.vision_grad.remove(&(b, mb)));
                    if let Some(g) = self.bridge(b).backward(comm, grad.as_ref(), mb).await? {
                        self.enc_mut(b).accept_grad(ctx, mb, g);
                    }
                }
                PhaseStep::EncoderBackward { encoder, mbs } => {
                    let k = enc_index(encoder);
                    if let Some(w) = self.enc[k].as_mut() {
                        if !w.is_last() {
                            for &mb in mbs {
                                enc_p2p(w, comm, ctx, OpKind::Recv, Pass::Bwd, mb).await?;
                            }
                        }
                        w.backward(comm, ctx, mbs).await?;
                        if w.coord.pp > 0 {
                            for &mb in mbs {
                                enc_p2p(w, comm, ctx, OpKind::Send, Pass::Bwd, mb).await?;
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Phase-2 ops refer to edges of the LLM-only graph, which are all P2P.
    async fn llm_p2p(&mut self, comm: &Comm, ctx: &Ctx<'_>, op: &CommOp) -> Result<(), EngineError> {
        let llm_graph = &ctx.phase.expect("phase plan").llm;
        let sub = Ctx {
            graph: llm_graph,
            ..*ctx
        };
        self.comm_op(comm, &sub, op).await
    }

    async fn sync_and_update(&mut self, comm: &Comm, ctx: &Ctx<'_>) -> Result<(), EngineError> {
        let lr = ctx.model.spec.learning_rate;
        let mut workers: Vec<(String, Vec<Rank>, Vec<(String, &mut Matrix, &mut Matrix)>)> = Vec::new();
        for w in self.enc.iter_mut().flatten() {
            let group = w.layout.dp_cp_group(w.coord);
            workers.push((w.name.clone(), group, w.params_mut()));
        }
        if let Some(w) = self.llm.as_mut() {
            let group = w.layout.dp_cp_group(w.coord);
            workers.push((LANGUAGE.to_string(), group, w.params_mut()));
        }
        for (module, group, params) in workers {
            if group.len() > 1 {
                let flat: Vec<f64> = params.iter().flat_map(|(_, _, g)| g.data().to_vec()).collect();
                let summed = comm
                    .all_reduce(&group, &Tag::plain(format!("{module}.grad")), flat)
                    .await?;
                let mut off = 0;
                for (name, w, g) in params {
                    let len = g.data().len();
                    *g = Matrix::from_vec(g.rows(), g.cols(), summed[off..off + len].to_vec());
                    off += len;
                    if ctx.model.is_trainable(ctx.flags, &name) {
                        w.sgd_step(g, lr);
                    }
                }
            } else {
                for (name, w, g) in params {
                    if ctx.model.is_trainable(ctx.flags, &name) {
                        w.sgd_step(g, lr);
                    }
                }
            }
        }
        Ok(())
    }

    async fn run_step(&mut self, comm: Comm, ctx: &Ctx<'_>) -> Result<f64, EngineError> {
        match ctx.mode {
            ExecutionMode::NonColocated => self.run_nc(&comm, ctx).await?,
            ExecutionMode::Colocated => self.run_colocated(&comm, ctx).await?,
        }
        self.sync_and_update(&comm, ctx).await?;
        Ok(self.llm.as_ref().map_or(0.0, |w| w.loss))
    }
}

async fn enc_p2p(
    w: &mut EncWorker,
    comm: &Comm,
    ctx: &Ctx<'_>,
    op: OpKind,
    pass: Pass,
    mb: usize,
) -> Result<(), EngineError> {
    let label = w.p2p_label();
    let rank = comm.rank();
    let rows = w.rows_per_mb(ctx);
    let cols = ctx.model.spec.d_enc / w.layout.tp;
    match (op, pass) {
        (OpKind::Send, Pass::Fwd) => {
            let h = take(&mut w.out_fwd, mb, rank, "encoder activation")?;
            comm.send(w.stage_peer(1), &Tag::fwd(label, mb), h.into_data())?;
        }
        (OpKind::Recv, Pass::Fwd) => {
            let data = comm.recv(w.stage_peer(-1), &Tag::fwd(label, mb)).await?;
            w.in_fwd.insert(mb, Matrix::from_vec(rows, cols, data));
        }
        (OpKind::Send, Pass::Bwd) => {
            let g = take(&mut w.out_bwd, mb, rank, "encoder activation gradient")?;
            comm.send(w.stage_peer(-1), &Tag::bwd(label, mb), g.into_data())?;
        }
        (OpKind::Recv, Pass::Bwd) => {
            let data = comm.recv(w.stage_peer(1), &Tag::bwd(label, mb)).await?;
            w.in_bwd.insert(mb, Matrix::from_vec(rows, cols, data));
        }
    }
    Ok(())
}

pub struct Engine {
    cfg: ExperimentConfig,
    model: TinyModel,
    flags: TrainFlags,
    mode: ExecutionMode,
    graph: StageGraph,
    programs: Vec<NodeProgram>,
    dispatch: Option<DispatchTable>,
    phase: Option<PhasePlan>,
    plans: Vec<Rc<BridgePlan>>,
    fabric: Fabric,
    ranks: Vec<RankState>,
    step: usize,
    fault: Option<Fault>,
}

impl Engine {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, EngineError> {
        cfg.validate()?;
        let model = cfg.tiny_model()?;
        let mode = cfg.execution_mode()?;
        let graph = build_stage_graph(&cfg.modules, &cfg.edge_names())?;
        let sched_cfg = ScheduleConfig {
            num_microbatches: cfg.run.num_microbatches,
        };
        let (programs, dispatch, phase) = match mode {
            ExecutionMode::NonColocated => {
                let table = generate_1f1b_dispatch(&graph, &sched_cfg)?;
                let v = validate_dispatch(&table, &graph, sched_cfg.num_microbatches);
                if !v.is_empty() {
                    return Err(EngineError::InvalidDispatch(v.iter().map(|x| x.to_string()).collect()));
                }
                (table.programs.clone(), Some(table), None)
            }
            ExecutionMode::Colocated => {
                let plan = generate_three_phase(
                    &graph,
                    LANGUAGE,
                    &cfg.encoder_names(),
                    &sched_cfg,
                    cfg.run.offload_encoder,
                )?;
                (plan.phase2.programs.clone(), None, Some(plan))
            }
        };
        let plans: Vec<Rc<BridgePlan>> = cfg
            .boundary_edges()?
            .iter()
            .map(|e| plan_bridge(e).map(Rc::new))
            .collect::<Result<_, _>>()?;

        let params = model.init_params(cfg.run.seed);
        let world = cfg.world_size();
        let mut ranks = Vec::with_capacity(world);
        for rank in 0..world {
            let mut enc = Vec::new();
            for (k, layout) in cfg.encoders().into_iter().enumerate() {
                enc.push(if layout.contains(rank) {
                    let coord = layout.coord_of_rank(rank)?;
                    let slice = |name: String| {
                        let axis = model.param_kind(&name).expect("known").axis();
                        shard_param(&params[&name], axis, coord.tp, layout.tp)
                    };
                    let w1 = (coord.pp == 0).then(|| slice(format!("{}.w1", layout.name)));
                    let w2 = (coord.pp + 1 == layout.pp).then(|| slice(format!("{}.w2", layout.name)));
                    Some(EncWorker {
                        k,
                        name: layout.name.clone(),
                        layout: layout.clone(),
                        coord,
                        g1: w1.as_ref().map(|w| Matrix::zeros(w.rows(), w.cols())),
                        g2: w2.as_ref().map(|w| Matrix::zeros(w.rows(), w.cols())),
                        w1,
                        w2,
                        saved: BTreeMap::new(),
                        in_fwd: BTreeMap::new(),
                        out_fwd: BTreeMap::new(),
                        in_bwd: BTreeMap::new(),
                        out_bwd: BTreeMap::new(),
                    })
                } else {
                    None
                });
            }
            let lang = cfg.language();
            let llm = if lang.contains(rank) {
                let coord = lang.coord_of_rank(rank)?;
                let layers = model.stage_layers(coord.pp, lang.pp);
                let slice = |l: usize, which: &str| {
                    let name = layer_name(l, which);
                    let axis = model.param_kind(&name).expect("known").axis();
                    shard_param(&params[&name], axis, coord.tp, lang.tp)
                };
                let wa: Vec<Matrix> = layers.clone().map(|l| slice(l, "wa")).collect();
                let wb: Vec<Matrix> = layers.clone().map(|l| slice(l, "wb")).collect();
                Some(LlmWorker {
                    layout: lang.clone(),
                    coord,
                    layers,
                    ga: wa.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
                    gb: wb.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
                    wa,
                    wb,
                    saved: BTreeMap::new(),
                    vision_in: BTreeMap::new(),
                    vision_grad: BTreeMap::new(),
                    in_fwd: BTreeMap::new(),
                    out_fwd: BTreeMap::new(),
                    in_bwd: BTreeMap::new(),
                    out_bwd: BTreeMap::new(),
                    loss: 0.0,
                })
            } else {
                None
            };
            let bridges = plans
                .iter()
                .map(|p| {
                    p.participants()
                        .contains(&rank)
                        .then(|| BridgeEndpoint::new(Rc::clone(p), rank))
                })
                .collect();
            ranks.push(RankState {
                rank,
                enc,
                llm,
                bridges,
            });
        }

        Ok(Self {
            cfg: cfg.clone(),
            model,
            flags: cfg.train_flags(),
            mode,
            graph,
            programs,
            dispatch,
            phase,
            plans,
            fabric: Fabric::new(world),
            ranks,
            step: 0,
            fault: None,
        })
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn mode(&self) -> ExecutionMode {
        self.mode
    }

    pub fn model(&self) -> &TinyModel {
        &self.model
    }

    pub fn graph(&self) -> &StageGraph {
        &self.graph
    }

    pub fn dispatch(&self) -> Option<&DispatchTable> {
        self.dispatch.as_ref()
    }

    pub fn phase_plan(&self) -> Option<&PhasePlan> {
        self.phase.as_ref()
    }

    pub fn bridge_plans(&self) -> Vec<&BridgePlan> {
        self.plans.iter().map(|p| p.as_ref()).collect()
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Runs one optimizer step; returns the post-step parameters with the
    /// gradients and loss that produced them.
    pub fn step(&mut self) -> Result<StepState, EngineError> {
        let batch = self
            .model
            .make_batch(self.cfg.run.global_batch, self.cfg.run.seed, self.step);
        for st in &mut self.ranks {
            for w in st.enc.iter_mut().flatten() {
                for g in [w.g1.as_mut(), w.g2.as_mut()].into_iter().flatten() {
                    *g = Matrix::zeros(g.rows(), g.cols());
                }
            }
            if let Some(w) = st.llm.as_mut() {
                for g in w.ga.iter_mut().chain(w.gb.iter_mut()) {
                    *g = Matrix::zeros(g.rows(), g.cols());
                }
                w.loss = 0.0;
            }
        }
        let ctx = Ctx {
            model: &self.model,
            flags: &self.flags,
            batch: &batch,
            graph: &self.graph,
            programs: &self.programs,
            phase: self.phase.as_ref(),
            mode: self.mode,
            bmb: self.cfg.micro_batch(),
            world: self.cfg.world_size(),
            fault: self.fault.as_ref(),
        };
        let fabric = &mut self.fabric;
        let scripts: Vec<(Rank, RankScript<'_, f64, EngineError>)> = self
            .ranks
            .iter_mut()
            .map(|st| {
                let rank = st.rank;
                let comm = fabric.comm(rank);
                let ctx = &ctx;
                let fut: RankScript<'_, f64, EngineError> = Box::pin(st.run_step(comm, ctx));
                (rank, fut)
            })
            .collect();
        let losses = fabric.run(scripts)?;
        self.step += 1;
        let loss = losses.iter().sum();
        let (params, grads) = self.assemble()?;
        Ok(StepState { params, grads, loss })
    }

    /// Full parameters and gradients rebuilt from TP slices, after checking
    /// that every DP/CP replica of each slice is bit-identical.
    pub fn assemble(&self) -> Result<(ParamSet, ParamSet), EngineError> {
        let mut params = ParamSet::new();
        let mut grads = ParamSet::new();
        for name in self.model.param_names() {
            let kind = self.model.param_kind(&name).expect("known");
            let (module, stage) = match &kind {
                ParamKind::EncoderBody { encoder } => (self.model.encoders[*encoder].clone(), Some(0)),
                ParamKind::Projector { encoder } => (self.model.encoders[*encoder].clone(), None),
                ParamKind::LayerIn { layer } | ParamKind::LayerOut { layer } => {
                    let lang = self.cfg.language();
                    (
                        LANGUAGE.to_string(),
                        Some(layer / (self.model.spec.llm_layers / lang.pp)),
                    )
                }
            };
            let layout = self.cfg.module(&module).expect("declared");
            let stage = stage.unwrap_or(layout.pp - 1);
            let mut wp = Vec::new();
            let mut gp = Vec::new();
            for t in 0..layout.tp {
                let mut rep: Option<(Matrix, Matrix)> = None;
                for dp in 0..layout.dp {
                    for cp in 0..layout.cp {
                        let r = layout.rank_of_coord(GridCoord::new(t, cp, stage, dp))?;
                        let (w, g) = self.slice_of(r, &name).expect("rank holds the slice");
                        match &rep {
                            None => rep = Some((w.clone(), g.clone())),
                            Some((w0, g0)) => {
                                if w0 != w || g0 != g {
                                    return Err(EngineError::ReplicaDivergence(format!("{name} tp={t}")));
                                }
                            }
                        }
                    }
                }
                let (w, g) = rep.expect("at least one replica");
                wp.push(w);
                gp.push(g);
            }
            let axis = kind.axis();
            params.insert(name.clone(), assemble_param(&wp, axis));
            grads.insert(name, assemble_param(&gp, axis));
        }
        Ok((params, grads))
    }

    fn slice_of(&self, rank: Rank, name: &str) -> Option<(&Matrix, &Matrix)> {
        let st = &self.ranks[rank];
        match self.model.param_kind(name)? {
            ParamKind::EncoderBody { encoder } => {
                let w = st.enc[encoder].as_ref()?;
                Some((w.w1.as_ref()?, w.g1.as_ref()?))
            }
            ParamKind::Projector { encoder } => {
                let w = st.enc[encoder].as_ref()?;
                Some((w.w2.as_ref()?, w.g2.as_ref()?))
            }
            ParamKind::LayerIn { layer } => {
                let w = st.llm.as_ref()?;
                let i = layer.checked_sub(w.layers.start)?;
                Some((w.wa.get(i)?, w.ga.get(i)?))
            }
            ParamKind::LayerOut { layer } => {
                let w = st.llm.as_ref()?;
                let i = layer.checked_sub(w.layers.start)?;
                Some((w.wb.get(i)?, w.gb.get(i)?))
            }
        }
    }
}
