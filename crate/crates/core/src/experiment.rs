//! One experiment per call: parity, dispatch, traffic or trace, rendered as
//! stable text.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::config::{ConfigError, ExecutionMode, ExperimentConfig};
use crate::engine::{Engine, EngineError};
use crate::model::LANGUAGE;
use crate::oracle::{oracle_step, parity_compare, OracleError, ParityReport};
use crate::sched::{
    build_stage_graph, generate_1f1b_dispatch, generate_three_phase, validate_dispatch, SchedError, ScheduleConfig,
};
use crate::simnet::{Direction, EventTrace, SimError, TrafficLedger, ELEMENT_BYTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Parity,
    Dispatch,
    Traffic,
    Trace,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "parity" => Ok(Mode::Parity),
            "dispatch" => Ok(Mode::Dispatch),
            "traffic" => Ok(Mode::Traffic),
            "trace" => Ok(Mode::Trace),
            _ => Err(format!("unknown mode {s:?} (parity|dispatch|traffic|trace)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Parity => "parity",
            Mode::Dispatch => "dispatch",
            Mode::Traffic => "traffic",
            Mode::Trace => "trace",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Engine(#[from] EngineError),
    #[error("sched: {0}")]
    Sched(#[from] SchedError),
    #[error("oracle: {0}")]
    Oracle(#[from] OracleError),
    #[error("simnet: {0}")]
    Sim(#[from] SimError),
}

impl ExperimentError {
    pub fn is_deadlock(&self) -> bool {
        matches!(
            self,
            ExperimentError::Sim(SimError::Deadlock { .. })
                | ExperimentError::Engine(EngineError::Sim(SimError::Deadlock { .. }))
        )
    }

    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config(ConfigError::Validation(_))
                | ExperimentError::Engine(EngineError::Config(ConfigError::Validation(_)))
                | ExperimentError::Engine(EngineError::InvalidDispatch(_))
                | ExperimentError::Sched(_)
                | ExperimentError::Engine(EngineError::Sched(_))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    ParityFailed,
    Violations(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub verdict: Verdict,
    pub text: String,
    pub parity: Vec<ParityReport>,
    pub losses: Vec<f64>,
    pub ledger: Option<TrafficLedger>,
    pub trace: Option<EventTrace>,
}

impl ExperimentReport {
    fn new(mode: Mode, text: String) -> Self {
        Self {
            mode,
            verdict: Verdict::Pass,
            text,
            parity: Vec::new(),
            losses: Vec::new(),
            ledger: None,
            trace: None,
        }
    }
}

fn header(cfg: &ExperimentConfig, mode: Mode) -> Result<String, ConfigError> {
    let mut out = format!(
        "experiment mode={mode} placement={} world={} steps={} nmb={} batch={} seed={}\n",
        cfg.execution_mode()?,
        cfg.world_size(),
        cfg.run.steps,
        cfg.run.num_microbatches,
        cfg.run.global_batch,
        cfg.run.seed
    );
    for m in &cfg.modules {
        let r = m.rank_range();
        let _ = writeln!(
            out,
            "module {} tp={} cp={} pp={} dp={} ranks=[{},{})",
            m.name, m.tp, m.cp, m.pp, m.dp, r.start, r.end
        );
    }
    Ok(out)
}

pub fn run_experiment(cfg: &ExperimentConfig, mode: Mode) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()?;
    let mut text = header(cfg, mode)?;
    match mode {
        Mode::Parity => {
            let mut engine = Engine::new(cfg)?;
            let model = engine.model().clone();
            let flags = cfg.train_flags();
            let mut params = model.init_params(cfg.run.seed);
            let mut reports = Vec::new();
            let mut losses = Vec::new();
            for step in 0..cfg.run.steps {
                let batch = model.make_batch(cfg.run.global_batch, cfg.run.seed, step);
                let want = oracle_step(&model, &params, &batch, cfg.run.num_microbatches, &flags);
                let got = engine.step()?;
                reports.push(parity_compare(step, &got, &want, cfg.run.tolerance)?);
                losses.push(got.loss);
                params = want.params;
            }
            for r in &reports {
                text.push_str(&r.render_text());
            }
            for r in &reports {
                text.push_str(&r.render_lines());
            }
            let passed = reports.iter().all(|r| r.passed());
            let worst = reports.iter().map(|r| r.max_deviation()).fold(0.0, f64::max);
            let _ = writeln!(
                text,
                "summary {} steps={} max_deviation={:.3e} tolerance={:.1e}",
                if passed { "PASS" } else { "FAIL" },
                reports.len(),
                worst,
                cfg.run.tolerance
            );
            let mut rep = ExperimentReport::new(mode, text);
            rep.verdict = if passed { Verdict::Pass } else { Verdict::ParityFailed };
            rep.parity = reports;
            rep.losses = losses;
            Ok(rep)
        }
        Mode::Dispatch => {
            let graph = build_stage_graph(&cfg.modules, &cfg.edge_names())?;
            let sched = ScheduleConfig {
                num_microbatches: cfg.run.num_microbatches,
            };
            let mut verdict = Verdict::Pass;
            match cfg.execution_mode()? {
                ExecutionMode::NonColocated => {
                    let table = generate_1f1b_dispatch(&graph, &sched)?;
                    text.push_str(&table.render());
                    let violations = validate_dispatch(&table, &graph, sched.num_microbatches);
                    let _ = writeln!(text, "violations {}", violations.len());
                    for v in &violations {
                        let _ = writeln!(text, "  {v}");
                    }
                    if !violations.is_empty() {
                        verdict = Verdict::Violations(violations.len());
                    }
                }
                ExecutionMode::Colocated => {
                    let plan =
                        generate_three_phase(&graph, LANGUAGE, &cfg.encoder_names(), &sched, cfg.run.offload_encoder)?;
                    text.push_str(&plan.render());
                }
            }
            let mut rep = ExperimentReport::new(mode, text);
            rep.verdict = verdict;
            Ok(rep)
        }
        Mode::Traffic => {
            let mut engine = Engine::new(cfg)?;
            let st = engine.step()?;
            let ledger = engine.fabric().ledger_snapshot()?;
            let _ = writeln!(text, "loss {:.12e}", st.loss);
            for plan in engine.bridge_plans() {
                let nmb = cfg.run.num_microbatches as u64;
                let per_mb = |dir| ledger.get(&plan.label(), dir).bytes / nmb;
                let expected = if plan.is_shared_rank() {
                    0
                } else {
                    (plan.edge.global_batch * plan.width() * ELEMENT_BYTES) as u64
                };
                let _ = writeln!(
                    text,
                    "boundary {} placement={} relation={} transport={} fwd_bytes_per_mb={} bwd_bytes_per_mb={} expected={}",
                    plan.label(),
                    plan.placement,
                    plan.relation,
                    if plan.is_shared_rank() { "shared-rank" } else { "leader-routed" },
                    per_mb(Direction::Fwd),
                    per_mb(Direction::Bwd),
                    expected
                );
            }
            text.push_str(&render_traffic(&ledger));
            let mut rep = ExperimentReport::new(mode, text);
            rep.losses = vec![st.loss];
            rep.ledger = Some(ledger);
            Ok(rep)
        }
        Mode::Trace => {
            let mut engine = Engine::new(cfg)?;
            let mut losses = Vec::new();
            for _ in 0..cfg.run.steps {
                losses.push(engine.step()?.loss);
            }
            let trace = engine.fabric().trace_export();
            text.push_str(&trace.render());
            let mut rep = ExperimentReport::new(mode, text);
            rep.losses = losses;
            rep.trace = Some(trace);
            Ok(rep)
        }
    }
}

/// One section per ledger label, sorted by label, one line per direction.
pub fn render_traffic(ledger: &TrafficLedger) -> String {
    let mut out = String::new();
    let mut current: Option<&str> = None;
    for (label, dir, e) in ledger.iter() {
        if current != Some(label) {
            let _ = writeln!(out, "[{label}]");
            current = Some(label);
        }
        let _ = writeln!(out, "  {dir} messages={} bytes={}", e.messages, e.bytes);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use crate::simnet::{LedgerEntry, Tag};

    const FAN_IN: &str = "\
[module.language]
tensor_model_parallel_size = 2
pipeline_model_parallel_size = 1
data_parallel_size = 2
rank_offset = 0

[module.images]
tensor_model_parallel_size = 1
pipeline_model_parallel_size = 1
data_parallel_size = 4
rank_offset = 4
";

    #[test]
    fn traffic_on_fan_in_counts_boundary_bytes() {
        let cfg = parse_config(FAN_IN).unwrap();
        let rep = run_experiment(&cfg, Mode::Traffic).unwrap();
        let ledger = rep.ledger.unwrap();
        let bmb = cfg.micro_batch();
        let width = cfg.tiny_model().unwrap().boundary_width();
        let want = (bmb * width * ELEMENT_BYTES * cfg.run.num_microbatches) as u64;
        assert_eq!(ledger.get("images->language", Direction::Fwd).bytes, want);
        assert_eq!(ledger.get("images->language", Direction::Bwd).bytes, want);
        assert!(rep.text.contains("leader-routed"));
    }

    #[test]
    fn traffic_sections_sorted_by_label() {
        let mut ledger = TrafficLedger::default();
        ledger.record(&Tag::fwd("b->language", 0), 3, 24);
        ledger.record(&Tag::fwd("a->language", 0), 1, 8);
        ledger.record(&Tag::bwd("a->language", 0), 1, 8);
        let text = render_traffic(&ledger);
        assert_eq!(
            text,
            "[a->language]\n  fwd messages=1 bytes=8\n  bwd messages=1 bytes=8\n[b->language]\n  fwd messages=3 bytes=24\n"
        );
        assert_eq!(
            ledger.get("b->language", Direction::Fwd),
            LedgerEntry { messages: 3, bytes: 24 }
        );
    }

    #[test]
    fn parity_mode_reports_pass() {
        let cfg = parse_config(&format!("{FAN_IN}[run]\nsteps = 2\n")).unwrap();
        let rep = run_experiment(&cfg, Mode::Parity).unwrap();
        assert_eq!(rep.verdict, Verdict::Pass);
        assert_eq!(rep.parity.len(), 2);
        assert!(rep.text.contains("summary PASS steps=2"));
    }

    #[test]
    fn modes_parse() {
        assert_eq!("trace".parse::<Mode>().unwrap(), Mode::Trace);
        assert!("bogus".parse::<Mode>().is_err());
    }
}
