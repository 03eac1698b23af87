//! The toy multimodal model: per-encoder body (`w1`) and projector (`w2`),
//! token insertion, then a stack of token-wise two-matrix MLP layers.
//!
//! Full parameters are drawn once from a canonical stream and sliced per
//! layout, so every layout of the same seed starts from identical weights.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::Matrix;

pub const LANGUAGE: &str = "language";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("divisibility violation: {0}")]
    DivisibilityViolation(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    pub fn apply(&self, m: &Matrix) -> Matrix {
        match self {
            Activation::Identity => m.clone(),
            Activation::Tanh => m.map(f64::tanh),
        }
    }

    /// `upstream ⊙ act'(pre)`
    pub fn backprop(&self, pre: &Matrix, upstream: &Matrix) -> Matrix {
        match self {
            Activation::Identity => upstream.clone(),
            Activation::Tanh => upstream.zip_map(pre, |g, a| {
                let t = a.tanh();
                g * (1.0 - t * t)
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyModelSpec {
    pub d_in: usize,
    pub d_enc: usize,
    pub d_h: usize,
    /// Tokens per sample.
    pub seq_len: usize,
    /// Vision tokens per sample contributed by each encoder.
    pub vision_tokens: usize,
    /// Total LLM layers, split evenly across the LLM pipeline stages.
    pub llm_layers: usize,
    pub activation: Activation,
    pub learning_rate: f64,
}

impl Default for TinyModelSpec {
    fn default() -> Self {
        Self {
            d_in: 6,
            d_enc: 8,
            d_h: 8,
            seq_len: 8,
            vision_tokens: 4,
            llm_layers: 4,
            activation: Activation::Tanh,
            learning_rate: 0.05,
        }
    }
}

/// Which parameter matrix is sharded along which axis under TP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardAxis {
    /// Output columns split across TP ranks.
    Column,
    /// Input rows split across TP ranks.
    Row,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamKind {
    EncoderBody { encoder: usize },
    Projector { encoder: usize },
    LayerIn { layer: usize },
    LayerOut { layer: usize },
}

impl ParamKind {
    pub fn axis(&self) -> ShardAxis {
        match self {
            ParamKind::EncoderBody { .. } | ParamKind::LayerIn { .. } => ShardAxis::Column,
            ParamKind::Projector { .. } | ParamKind::LayerOut { .. } => ShardAxis::Row,
        }
    }
}

pub type ParamSet = BTreeMap<String, Matrix>;

/// Per-sample training data for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub samples: usize,
    /// One matrix per encoder, `samples * S_v` rows of `d_in`.
    pub vision: Vec<Matrix>,
    /// `samples * (S - n_enc * S_v)` rows of `d_h`.
    pub text: Matrix,
    /// `samples * S` rows of `d_h`.
    pub target: Matrix,
}

/// Frozen parameter groups. A group is `<encoder>` (the body),
/// `<encoder>_projector`, or `language`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainFlags {
    pub frozen: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    pub spec: TinyModelSpec,
    pub encoders: Vec<String>,
}

impl TinyModel {
    pub fn new(spec: TinyModelSpec, encoders: Vec<String>) -> Result<Self, ModelError> {
        let m = Self { spec, encoders };
        let s = &m.spec;
        let dims = [
            ("d_in", s.d_in),
            ("d_enc", s.d_enc),
            ("d_h", s.d_h),
            ("seq_len", s.seq_len),
            ("vision_tokens", s.vision_tokens),
            ("llm_layers", s.llm_layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::ShapeMismatch(format!("{name} must be positive")));
        }
        if m.encoders.is_empty() {
            return Err(ModelError::ShapeMismatch("at least one encoder is required".into()));
        }
        if m.encoders.len() * s.vision_tokens > s.seq_len {
            return Err(ModelError::ShapeMismatch(format!(
                "{} encoders x {} vision tokens exceed seq_len {}",
                m.encoders.len(),
                s.vision_tokens,
                s.seq_len
            )));
        }
        Ok(m)
    }

    pub fn vision_positions(&self) -> usize {
        self.encoders.len() * self.spec.vision_tokens
    }

    pub fn text_tokens(&self) -> usize {
        self.spec.seq_len - self.vision_positions()
    }

    /// Values per sample crossing an encoder boundary.
    pub fn boundary_width(&self) -> usize {
        self.spec.vision_tokens * self.spec.d_h
    }

    /// Parameter names in canonical initialization order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for e in &self.encoders {
            names.push(format!("{e}.w1"));
            names.push(format!("{e}.w2"));
        }
        for l in 0..self.spec.llm_layers {
            names.push(layer_name(l, "wa"));
            names.push(layer_name(l, "wb"));
        }
        names
    }

    pub fn param_kind(&self, name: &str) -> Option<ParamKind> {
        if let Some(rest) = name.strip_prefix("language.layer") {
            let (idx, which) = rest.split_once('.')?;
            let layer: usize = idx.parse().ok()?;
            if layer >= self.spec.llm_layers {
                return None;
            }
            return match which {
                "wa" => Some(ParamKind::LayerIn { layer }),
                "wb" => Some(ParamKind::LayerOut { layer }),
                _ => None,
            };
        }
        let (enc, which) = name.rsplit_once('.')?;
        let encoder = self.encoders.iter().position(|e| e == enc)?;
        match which {
            "w1" => Some(ParamKind::EncoderBody { encoder }),
            "w2" => Some(ParamKind::Projector { encoder }),
            _ => None,
        }
    }

    pub fn param_shape(&self, name: &str) -> Option<(usize, usize)> {
        let s = &self.spec;
        Some(match self.param_kind(name)? {
            ParamKind::EncoderBody { .. } => (s.d_in, s.d_enc),
            ParamKind::Projector { .. } => (s.d_enc, s.d_h),
            ParamKind::LayerIn { .. } | ParamKind::LayerOut { .. } => (s.d_h, s.d_h),
        })
    }

    /// Trainable-flag group of a parameter.
    pub fn param_group(&self, name: &str) -> Option<String> {
        Some(match self.param_kind(name)? {
            ParamKind::EncoderBody { encoder } => self.encoders[encoder].clone(),
            ParamKind::Projector { encoder } => format!("{}_projector", self.encoders[encoder]),
            ParamKind::LayerIn { .. } | ParamKind::LayerOut { .. } => LANGUAGE.to_string(),
        })
    }

    pub fn param_groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self
            .encoders
            .iter()
            .flat_map(|e| [e.clone(), format!("{e}_projector")])
            .collect();
        g.push(LANGUAGE.to_string());
        g
    }

    pub fn is_trainable(&self, flags: &TrainFlags, name: &str) -> bool {
        self.param_group(name).is_some_and(|g| !flags.frozen.contains(&g))
    }

    /// Layers owned by LLM pipeline stage `stage` of `pp`.
    pub fn stage_layers(&self, stage: usize, pp: usize) -> Range<usize> {
        let per = self.spec.llm_layers / pp;
        stage * per..(stage + 1) * per
    }

    /// Checks the sharding constraints for one module's TP/CP/PP degrees.
    pub fn check_module(&self, module: &str, tp: usize, cp: usize, pp: usize) -> Result<(), ModelError> {
        let s = &self.spec;
        let fail = |msg: String| Err(ModelError::DivisibilityViolation(format!("{module}: {msg}")));
        if module == LANGUAGE {
            if s.d_h % tp != 0 {
                return fail(format!("d_h {} not divisible by tp {tp}", s.d_h));
            }
            if s.seq_len % cp != 0 {
                return fail(format!("seq_len {} not divisible by cp {cp}", s.seq_len));
            }
            if s.llm_layers % pp != 0 {
                return fail(format!("llm_layers {} not divisible by pp {pp}", s.llm_layers));
            }
        } else {
            if s.d_enc % tp != 0 {
                return fail(format!("d_enc {} not divisible by tp {tp}", s.d_enc));
            }
            if cp != 1 {
                return fail(format!("encoder context parallel size must be 1, got {cp}"));
            }
            if pp > 2 {
                return fail(format!("encoder pipeline size must be 1 or 2, got {pp}"));
            }
        }
        Ok(())
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let mut out = ParamSet::new();
        for name in self.param_names() {
            let (r, c) = self.param_shape(&name).expect("known name");
            let scale = 1.0 / (r as f64).sqrt();
            let m = Matrix::from_fn(r, c, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            });
            out.insert(name, m);
        }
        out
    }

    /// Deterministic batch for `step`; each step reads its own stream.
    pub fn make_batch(&self, samples: usize, seed: u64, step: usize) -> TrainBatch {
        let s = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step as u64 + 1);
        let mut normal = |scale: f64| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        };
        let vision = (0..self.encoders.len())
            .map(|_| Matrix::from_fn(samples * s.vision_tokens, s.d_in, |_, _| normal(1.0)))
            .collect();
        let text = Matrix::from_fn(samples * self.text_tokens(), s.d_h, |_, _| normal(1.0));
        let target = Matrix::from_fn(samples * s.seq_len, s.d_h, |_, _| normal(0.5));
        TrainBatch {
            samples,
            vision,
            text,
            target,
        }
    }

    /// Token matrix for `n` consecutive samples restricted to positions `pos`.
    /// `vision[k]` holds `n * S_v` projected tokens of encoder `k`.
    pub fn assemble_tokens(&self, vision: &[Matrix], text: &Matrix, n: usize, pos: Range<usize>) -> Matrix {
        let (sv, nv, nt) = (self.spec.vision_tokens, self.vision_positions(), self.text_tokens());
        let mut data = Vec::with_capacity(n * pos.len() * self.spec.d_h);
        for i in 0..n {
            for p in pos.clone() {
                let row = if p < nv {
                    vision[p / sv].row(i * sv + p % sv)
                } else {
                    text.row(i * nt + p - nv)
                };
                data.extend_from_slice(row);
            }
        }
        Matrix::from_vec(n * pos.len(), self.spec.d_h, data)
    }

    /// Inverse of [`assemble_tokens`] for the vision rows: per encoder,
    /// `n * S_v` gradient rows, zero outside `pos`.
    pub fn split_vision_grads(&self, dz: &Matrix, n: usize, pos: Range<usize>) -> Vec<Matrix> {
        let (sv, nv) = (self.spec.vision_tokens, self.vision_positions());
        let mut out = vec![Matrix::zeros(n * sv, self.spec.d_h); self.encoders.len()];
        for i in 0..n {
            for (j, p) in pos.clone().enumerate() {
                if p >= nv {
                    continue;
                }
                let src = dz.row(i * pos.len() + j);
                let m = &mut out[p / sv];
                for (c, &v) in src.iter().enumerate() {
                    m.set(i * sv + p % sv, c, v);
                }
            }
        }
        out
    }

    /// Target rows of `n` samples (already sliced by sample) restricted to `pos`.
    pub fn target_slice(&self, target: &Matrix, n: usize, pos: Range<usize>) -> Matrix {
        let s = self.spec.seq_len;
        let mut data = Vec::with_capacity(n * pos.len() * self.spec.d_h);
        for i in 0..n {
            for p in pos.clone() {
                data.extend_from_slice(target.row(i * s + p));
            }
        }
        Matrix::from_vec(n * pos.len(), self.spec.d_h, data)
    }
}

pub fn layer_name(layer: usize, which: &str) -> String {
    format!("language.layer{layer}.{which}")
}

impl TrainBatch {
    pub fn vision_rows(&self, encoder: usize, samples: Range<usize>, sv: usize) -> Matrix {
        self.vision[encoder].slice_rows(samples.start * sv..samples.end * sv)
    }

    pub fn text_rows(&self, samples: Range<usize>, per_sample: usize) -> Matrix {
        self.text
            .slice_rows(samples.start * per_sample..samples.end * per_sample)
    }

    pub fn target_rows(&self, samples: Range<usize>, seq_len: usize) -> Matrix {
        self.target.slice_rows(samples.start * seq_len..samples.end * seq_len)
    }
}

/// TP slice `idx` of `tp` of a full parameter.
pub fn shard_param(full: &Matrix, axis: ShardAxis, idx: usize, tp: usize) -> Matrix {
    match axis {
        ShardAxis::Column => {
            let w = full.cols() / tp;
            full.slice_cols(idx * w..(idx + 1) * w)
        }
        ShardAxis::Row => {
            let h = full.rows() / tp;
            full.slice_rows(idx * h..(idx + 1) * h)
        }
    }
}

/// Reassembles TP slices in index order.
pub fn assemble_param(parts: &[Matrix], axis: ShardAxis) -> Matrix {
    match axis {
        ShardAxis::Column => Matrix::hstack(parts),
        ShardAxis::Row => Matrix::vstack(parts),
    }
}

/// Structured text dump of full parameters for cross-layout diffs.
pub fn dump_params(params: &ParamSet) -> String {
    let mut out = String::new();
    for (name, m) in params {
        let _ = writeln!(out, "tensor {name} {} {}", m.rows(), m.cols());
        for i in 0..m.rows() {
            let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.17e}")).collect();
            let _ = writeln!(out, "  {}", row.join(" "));
        }
    }
    out
}
