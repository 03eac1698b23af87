//! Experiment configuration: a flat, sectioned key-value text.
//!
//! ```text
//! # comment
//! [module.language]
//! tensor_model_parallel_size = 2
//! pipeline_model_parallel_size = 2
//! data_parallel_size = 1
//! rank_offset = 0
//!
//! [model]
//! d_h = 8
//!
//! [run]
//! steps = 20
//! ```
//!
//! Values are integers or decimals. `context_parallel_size` defaults to 1;
//! every `[model]` and `[run]` key has a default.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::grid::{partition_batch, placement_of, BoundaryEdge, GridError, ModuleLayout, Placement};
use crate::model::{Activation, ModelError, TinyModel, TinyModelSpec, TrainFlags, LANGUAGE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid config: {0}")]
    Validation(String),
}

impl From<GridError> for ConfigError {
    fn from(e: GridError) -> Self {
        ConfigError::Validation(e.to_string())
    }
}

impl From<ModelError> for ConfigError {
    fn from(e: ModelError) -> Self {
        ConfigError::Validation(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub steps: usize,
    pub num_microbatches: usize,
    /// Samples per optimizer step, across all microbatches.
    pub global_batch: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Frozen parameter groups (`train_<group> = 0`).
    pub frozen: BTreeSet<String>,
    pub offload_encoder: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            steps: 1,
            num_microbatches: 2,
            global_batch: 16,
            seed: 7,
            tolerance: 1e-10,
            frozen: BTreeSet::new(),
            offload_encoder: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Modules in declaration order.
    pub modules: Vec<ModuleLayout>,
    pub model: TinyModelSpec,
    pub run: RunSpec,
}

/// How the modules of a config share ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutionMode {
    /// Every module on its own disjoint rank range.
    NonColocated,
    /// Every module on the same rank range.
    Colocated,
}

impl fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecutionMode::NonColocated => "non-colocated",
            ExecutionMode::Colocated => "colocated",
        })
    }
}

impl ExperimentConfig {
    pub fn language(&self) -> &ModuleLayout {
        self.modules
            .iter()
            .find(|m| m.name == LANGUAGE)
            .expect("validated config has a language module")
    }

    pub fn encoders(&self) -> Vec<&ModuleLayout> {
        self.modules.iter().filter(|m| m.name != LANGUAGE).collect()
    }

    pub fn encoder_names(&self) -> Vec<String> {
        self.encoders().iter().map(|m| m.name.clone()).collect()
    }

    pub fn module(&self, name: &str) -> Option<&ModuleLayout> {
        self.modules.iter().find(|m| m.name == name)
    }

    pub fn micro_batch(&self) -> usize {
        self.run.global_batch / self.run.num_microbatches
    }

    pub fn world_size(&self) -> usize {
        self.modules.iter().map(|m| m.rank_range().end).max().unwrap_or(0)
    }

    pub fn tiny_model(&self) -> Result<TinyModel, ModelError> {
        TinyModel::new(self.model.clone(), self.encoder_names())
    }

    pub fn train_flags(&self) -> TrainFlags {
        TrainFlags {
            frozen: self.run.frozen.clone(),
        }
    }

    /// `(source, dest)` module names: every encoder feeds the language module.
    pub fn edge_names(&self) -> Vec<(String, String)> {
        self.encoders()
            .iter()
            .map(|m| (m.name.clone(), LANGUAGE.to_string()))
            .collect()
    }

    pub fn boundary_edges(&self) -> Result<Vec<BoundaryEdge>, ConfigError> {
        let model = self.tiny_model()?;
        Ok(self
            .encoders()
            .into_iter()
            .map(|m| {
                BoundaryEdge::new(
                    m.clone(),
                    self.language().clone(),
                    self.micro_batch(),
                    model.boundary_width(),
                )
            })
            .collect())
    }

    pub fn execution_mode(&self) -> Result<ExecutionMode, ConfigError> {
        let mut kinds = BTreeSet::new();
        for (i, a) in self.modules.iter().enumerate() {
            for b in &self.modules[i + 1..] {
                kinds.insert(match placement_of(a, b)? {
                    Placement::Colocated => 0,
                    Placement::NonColocated => 1,
                });
            }
        }
        match (kinds.contains(&0), kinds.contains(&1)) {
            (true, true) => Err(ConfigError::Validation(
                "modules must either all share one rank range or all use disjoint ranges".into(),
            )),
            (true, false) => Ok(ExecutionMode::Colocated),
            _ => Ok(ExecutionMode::NonColocated),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let langs = self.modules.iter().filter(|m| m.name == LANGUAGE).count();
        if langs != 1 {
            return Err(ConfigError::Validation(format!(
                "expected exactly one \"language\" module, found {langs}"
            )));
        }
        if self.modules.len() < 2 {
            return Err(ConfigError::Validation(
                "at least one encoder module is required".into(),
            ));
        }
        let mut names = BTreeSet::new();
        for m in &self.modules {
            if !names.insert(&m.name) {
                return Err(ConfigError::Validation(format!("module {} declared twice", m.name)));
            }
        }
        let r = &self.run;
        if r.num_microbatches == 0 {
            return Err(ConfigError::Validation("num_microbatches must be at least 1".into()));
        }
        if r.global_batch % r.num_microbatches != 0 {
            return Err(ConfigError::Validation(format!(
                "global_batch {} not divisible by num_microbatches {}",
                r.global_batch, r.num_microbatches
            )));
        }
        if !(r.tolerance >= 0.0) {
            return Err(ConfigError::Validation("tolerance must be non-negative".into()));
        }
        if !(self.model.learning_rate >= 0.0) {
            return Err(ConfigError::Validation("learning_rate must be non-negative".into()));
        }
        let model = self.tiny_model()?;
        for m in &self.modules {
            model.check_module(&m.name, m.tp, m.cp, m.pp)?;
            partition_batch(self.micro_batch(), m.dp)?;
        }
        let groups: BTreeSet<String> = model.param_groups().into_iter().collect();
        for g in &r.frozen {
            if !groups.contains(g) {
                return Err(ConfigError::Validation(format!("unknown parameter group train_{g}")));
            }
        }
        self.execution_mode()?;
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for m in &self.modules {
            let _ = writeln!(out, "[module.{}]", m.name);
            let _ = writeln!(out, "tensor_model_parallel_size = {}", m.tp);
            let _ = writeln!(out, "context_parallel_size = {}", m.cp);
            let _ = writeln!(out, "pipeline_model_parallel_size = {}", m.pp);
            let _ = writeln!(out, "data_parallel_size = {}", m.dp);
            let _ = writeln!(out, "rank_offset = {}", m.rank_offset);
            out.push('\n');
        }
        let s = &self.model;
        let _ = writeln!(out, "[model]");
        let _ = writeln!(out, "d_in = {}", s.d_in);
        let _ = writeln!(out, "d_enc = {}", s.d_enc);
        let _ = writeln!(out, "d_h = {}", s.d_h);
        let _ = writeln!(out, "seq_len = {}", s.seq_len);
        let _ = writeln!(out, "vision_tokens = {}", s.vision_tokens);
        let _ = writeln!(out, "llm_layers = {}", s.llm_layers);
        let _ = writeln!(out, "tanh_activation = {}", u8::from(s.activation == Activation::Tanh));
        let _ = writeln!(out, "learning_rate = {}", s.learning_rate);
        out.push('\n');
        let r = &self.run;
        let _ = writeln!(out, "[run]");
        let _ = writeln!(out, "steps = {}", r.steps);
        let _ = writeln!(out, "num_microbatches = {}", r.num_microbatches);
        let _ = writeln!(out, "global_batch = {}", r.global_batch);
        let _ = writeln!(out, "seed = {}", r.seed);
        let _ = writeln!(out, "tolerance = {}", r.tolerance);
        let _ = writeln!(out, "offload_encoder = {}", u8::from(r.offload_encoder));
        if let Ok(model) = self.tiny_model() {
            for g in model.param_groups() {
                let _ = writeln!(out, "train_{g} = {}", u8::from(!r.frozen.contains(&g)));
            }
        }
        out
    }
}

enum Section {
    None,
    Module(usize),
    Model,
    Run,
}

struct PendingModule {
    name: String,
    line: usize,
    tp: Option<usize>,
    cp: Option<usize>,
    pp: Option<usize>,
    dp: Option<usize>,
    offset: Option<usize>,
}

fn parse_int(v: &str, line: usize, key: &str) -> Result<usize, ConfigError> {
    v.parse().map_err(|_| ConfigError::Parse {
        line,
        msg: format!("{key}: expected a non-negative integer, got {v:?}"),
    })
}

fn parse_real(v: &str, line: usize, key: &str) -> Result<f64, ConfigError> {
    let ok = !v.is_empty()
        && v.chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | 'e' | 'E' | '-' | '+'));
    match v.parse::<f64>() {
        Ok(x) if ok && x.is_finite() => Ok(x),
        _ => Err(ConfigError::Parse {
            line,
            msg: format!("{key}: expected a number, got {v:?}"),
        }),
    }
}

fn parse_flag(v: &str, line: usize, key: &str) -> Result<bool, ConfigError> {
    match v {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(ConfigError::Parse {
            line,
            msg: format!("{key}: expected 0 or 1, got {v:?}"),
        }),
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut section = Section::None;
    let mut pending: Vec<PendingModule> = Vec::new();
    let mut model = TinyModelSpec::default();
    let mut run = RunSpec::default();
    let mut trained: Vec<(String, bool, usize)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(inner) = content.strip_prefix('[') {
            let Some(name) = inner.strip_suffix(']') else {
                return Err(ConfigError::Parse {
                    line,
                    msg: format!("unterminated section header {content:?}"),
                });
            };
            section = match name.trim() {
                "model" => Section::Model,
                "run" => Section::Run,
                other => match other.strip_prefix("module.") {
                    Some(m) if !m.is_empty() && m.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') => {
                        pending.push(PendingModule {
                            name: m.to_string(),
                            line,
                            tp: None,
                            cp: None,
                            pp: None,
                            dp: None,
                            offset: None,
                        });
                        Section::Module(pending.len() - 1)
                    }
                    _ => {
                        return Err(ConfigError::Parse {
                            line,
                            msg: format!("unknown section [{other}]"),
                        })
                    }
                },
            };
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Parse {
                line,
                msg: format!("expected key = value, got {content:?}"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        let unknown = || ConfigError::Parse {
            line,
            msg: format!("unknown key {key:?}"),
        };
        match section {
            Section::None => {
                return Err(ConfigError::Parse {
                    line,
                    msg: format!("key {key:?} outside any section"),
                })
            }
            Section::Module(i) => {
                let v = parse_int(value, line, key)?;
                let m = &mut pending[i];
                let slot = match key {
                    "tensor_model_parallel_size" => &mut m.tp,
                    "context_parallel_size" => &mut m.cp,
                    "pipeline_model_parallel_size" => &mut m.pp,
                    "data_parallel_size" => &mut m.dp,
                    "rank_offset" => &mut m.offset,
                    _ => return Err(unknown()),
                };
                *slot = Some(v);
            }
            Section::Model => match key {
                "d_in" => model.d_in = parse_int(value, line, key)?,
                "d_enc" => model.d_enc = parse_int(value, line, key)?,
                "d_h" => model.d_h = parse_int(value, line, key)?,
                "seq_len" => model.seq_len = parse_int(value, line, key)?,
                "vision_tokens" => model.vision_tokens = parse_int(value, line, key)?,
                "llm_layers" => model.llm_layers = parse_int(value, line, key)?,
                "tanh_activation" => {
                    model.activation = if parse_flag(value, line, key)? {
                        Activation::Tanh
                    } else {
                        Activation::Identity
                    }
                }
                "learning_rate" => model.learning_rate = parse_real(value, line, key)?,
                _ => return Err(unknown()),
            },
            Section::Run => match key {
                "steps" => run.steps = parse_int(value, line, key)?,
                "num_microbatches" => run.num_microbatches = parse_int(value, line, key)?,
                "global_batch" => run.global_batch = parse_int(value, line, key)?,
                "seed" => run.seed = parse_int(value, line, key)? as u64,
                "tolerance" => run.tolerance = parse_real(value, line, key)?,
                "offload_encoder" => run.offload_encoder = parse_flag(value, line, key)?,
                _ => match key.strip_prefix("train_") {
                    Some(g) if !g.is_empty() => trained.push((g.to_string(), parse_flag(value, line, key)?, line)),
                    _ => return Err(unknown()),
                },
            },
        }
    }

    let mut modules = Vec::new();
    for m in pending {
        let need = |v: Option<usize>, key: &str| {
            v.ok_or_else(|| ConfigError::Parse {
                line: m.line,
                msg: format!("module {} is missing {key}", m.name),
            })
        };
        let tp = need(m.tp, "tensor_model_parallel_size")?;
        let pp = need(m.pp, "pipeline_model_parallel_size")?;
        let dp = need(m.dp, "data_parallel_size")?;
        let offset = need(m.offset, "rank_offset")?;
        modules.push(ModuleLayout::new(&m.name, tp, m.cp.unwrap_or(1), pp, dp, offset)?);
    }
    for (g, on, _) in trained {
        if on {
            run.frozen.remove(&g);
        } else {
            run.frozen.insert(g);
        }
    }
    let cfg = ExperimentConfig { modules, model, run };
    cfg.validate()?;
    Ok(cfg)
}
