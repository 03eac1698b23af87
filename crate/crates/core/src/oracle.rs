//! Single-rank dense reference: the whole model on one rank, no sharding,
//! plus parity comparison and the brute-force batch interval oracle.

use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{BatchInterval, GridError};
use crate::model::{layer_name, ParamSet, TinyModel, TrainBatch, TrainFlags};
use crate::tensor::{rel_dev, Matrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("structure mismatch: {0}")]
    StructureMismatch(String),
}

/// Parameters after a step, together with the gradients and loss that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub params: ParamSet,
    pub grads: ParamSet,
    pub loss: f64,
}

/// Loss and gradients at `params` over the whole batch, accumulated
/// microbatch by microbatch.
pub fn dense_loss_and_grads(model: &TinyModel, params: &ParamSet, batch: &TrainBatch, nmb: usize) -> (f64, ParamSet) {
    let s = &model.spec;
    let act = s.activation;
    let total = batch.samples;
    let bmb = total / nmb;
    let norm = 1.0 / (total * s.seq_len * s.d_h) as f64;
    let nt = model.text_tokens();

    let mut grads: ParamSet = params
        .iter()
        .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols())))
        .collect();
    let mut loss = 0.0;

    for m in 0..nmb {
        let samples = m * bmb..(m + 1) * bmb;
        // encoders
        let mut enc_saved = Vec::new();
        let mut projected = Vec::new();
        for (k, name) in model.encoders.iter().enumerate() {
            let x = batch.vision_rows(k, samples.clone(), s.vision_tokens);
            let a1 = x.matmul(&params[&format!("{name}.w1")]);
            let h = act.apply(&a1);
            let p = h.matmul(&params[&format!("{name}.w2")]);
            projected.push(p);
            enc_saved.push((x, a1, h));
        }
        // sequence: each sample is [enc0 tokens, enc1 tokens, ..., text tokens]
        let mut z = Matrix::zeros(bmb * s.seq_len, s.d_h);
        for i in 0..bmb {
            let mut row = i * s.seq_len;
            for p in &projected {
                for t in 0..s.vision_tokens {
                    for c in 0..s.d_h {
                        z.set(row, c, p.get(i * s.vision_tokens + t, c));
                    }
                    row += 1;
                }
            }
            for t in 0..nt {
                for c in 0..s.d_h {
                    z.set(row, c, batch.text.get((samples.start + i) * nt + t, c));
                }
                row += 1;
            }
        }
        let mut layers = Vec::new();
        for l in 0..s.llm_layers {
            let a = z.matmul(&params[&layer_name(l, "wa")]);
            let u = act.apply(&a);
            let out = u.matmul(&params[&layer_name(l, "wb")]);
            layers.push((z, a, u));
            z = out;
        }
        let y = batch.target_rows(samples.clone(), s.seq_len);
        let err = z.zip_map(&y, |a, b| a - b);
        loss += err.sum_sq() * norm;
        let mut dz = err.map(|e| 2.0 * e * norm);

        for l in (0..s.llm_layers).rev() {
            let (zin, a, u) = &layers[l];
            let wa = &params[&layer_name(l, "wa")];
            let wb = &params[&layer_name(l, "wb")];
            grads
                .get_mut(&layer_name(l, "wb"))
                .unwrap()
                .add_assign(&u.t_matmul(&dz));
            let da = act.backprop(a, &dz.matmul_t(wb));
            grads
                .get_mut(&layer_name(l, "wa"))
                .unwrap()
                .add_assign(&zin.t_matmul(&da));
            dz = da.matmul_t(wa);
        }

        for (k, name) in model.encoders.iter().enumerate() {
            let mut dp = Matrix::zeros(bmb * s.vision_tokens, s.d_h);
            for i in 0..bmb {
                for t in 0..s.vision_tokens {
                    let src = i * s.seq_len + k * s.vision_tokens + t;
                    for c in 0..s.d_h {
                        dp.set(i * s.vision_tokens + t, c, dz.get(src, c));
                    }
                }
            }
            let (x, a1, h) = &enc_saved[k];
            let w2 = &params[&format!("{name}.w2")];
            grads
                .get_mut(&format!("{name}.w2"))
                .unwrap()
                .add_assign(&h.t_matmul(&dp));
            let da1 = act.backprop(a1, &dp.matmul_t(w2));
            grads
                .get_mut(&format!("{name}.w1"))
                .unwrap()
                .add_assign(&x.t_matmul(&da1));
        }
    }
    (loss, grads)
}

/// One dense training step with `nmb`-way gradient accumulation and SGD.
pub fn oracle_step(
    model: &TinyModel,
    params: &ParamSet,
    batch: &TrainBatch,
    nmb: usize,
    flags: &TrainFlags,
) -> StepState {
    let (loss, grads) = dense_loss_and_grads(model, params, batch, nmb);
    let mut next = params.clone();
    for (name, p) in next.iter_mut() {
        if model.is_trainable(flags, name) {
            p.sgd_step(&grads[name], model.spec.learning_rate);
        }
    }
    StepState {
        params: next,
        grads,
        loss,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdSample {
    pub name: String,
    pub fd: f64,
    pub analytic: f64,
    pub rel: f64,
}

/// Central-difference directional derivatives of the dense loss against
/// `⟨grads, dir⟩` for `per_param` random directions of every parameter.
/// Directions within 0.05 of orthogonal to the gradient are redrawn: there the
/// derivative cancels and a relative comparison measures only rounding.
pub fn finite_difference_check(
    model: &TinyModel,
    params: &ParamSet,
    batch: &TrainBatch,
    nmb: usize,
    grads: &ParamSet,
    per_param: usize,
    seed: u64,
    h: f64,
) -> Vec<FdSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, w) in params {
        let g = &grads[name];
        let gnorm = g.sum_sq().sqrt();
        for _ in 0..per_param {
            let dir = loop {
                let d = Matrix::from_fn(w.rows(), w.cols(), |_, _| rng.gen_range(-1.0..1.0));
                if g.dot(&d).abs() >= 0.05 * gnorm * d.sum_sq().sqrt() {
                    break d;
                }
            };
            let shifted = |sign: f64| {
                let mut q = params.clone();
                let v = q.get_mut(name).expect("present");
                *v = v.zip_map(&dir, |a, d| a + sign * h * d);
                dense_loss_and_grads(model, &q, batch, nmb).0
            };
            let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            let analytic = g.dot(&dir);
            out.push(FdSample {
                name: name.clone(),
                fd,
                analytic,
                rel: (fd - analytic).abs() / analytic.abs(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TensorRole {
    Param,
    Grad,
}

impl fmt::Display for TensorRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TensorRole::Param => "param",
            TensorRole::Grad => "grad",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deviation {
    pub role: TensorRole,
    pub name: String,
    pub max_rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParityReport {
    pub step: usize,
    pub tolerance: f64,
    pub loss: f64,
    pub loss_dev: f64,
    pub deviations: Vec<Deviation>,
}

impl ParityReport {
    pub fn passed(&self) -> bool {
        self.loss_dev <= self.tolerance && self.deviations.iter().all(|d| d.max_rel <= self.tolerance)
    }

    pub fn max_deviation(&self) -> f64 {
        self.deviations.iter().map(|d| d.max_rel).fold(self.loss_dev, f64::max)
    }

    /// Deviations sorted worst first; ties keep name order.
    pub fn worst(&self, n: usize) -> Vec<&Deviation> {
        let mut v: Vec<&Deviation> = self.deviations.iter().collect();
        v.sort_by(|a, b| b.max_rel.total_cmp(&a.max_rel));
        v.truncate(n);
        v
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "step {}: {} (max deviation {:.3e}, tolerance {:.1e}, loss {:.12e}, loss deviation {:.3e})",
            self.step,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_deviation(),
            self.tolerance,
            self.loss,
            self.loss_dev
        );
        for d in self.worst(3) {
            let _ = writeln!(out, "  worst {} {}: {:.3e}", d.role, d.name, d.max_rel);
        }
        out
    }

    pub fn render_lines(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "parity step={} kind=loss name=loss dev={:e} ok={}",
            self.step,
            self.loss_dev,
            u8::from(self.loss_dev <= self.tolerance)
        );
        for d in &self.deviations {
            let _ = writeln!(
                out,
                "parity step={} kind={} name={} dev={:e} ok={}",
                self.step,
                d.role,
                d.name,
                d.max_rel,
                u8::from(d.max_rel <= self.tolerance)
            );
        }
        out
    }
}

fn compare_sets(
    role: TensorRole,
    got: &ParamSet,
    want: &ParamSet,
    out: &mut Vec<Deviation>,
) -> Result<(), OracleError> {
    if got.len() != want.len() || got.keys().ne(want.keys()) {
        return Err(OracleError::StructureMismatch(format!(
            "{role} names differ: {:?} vs {:?}",
            got.keys().collect::<Vec<_>>(),
            want.keys().collect::<Vec<_>>()
        )));
    }
    for (name, a) in got {
        let b = &want[name];
        if a.shape() != b.shape() {
            return Err(OracleError::StructureMismatch(format!(
                "{role} {name}: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        out.push(Deviation {
            role,
            name: name.clone(),
            max_rel: a.max_rel_dev(b),
        });
    }
    Ok(())
}

pub fn parity_compare(
    step: usize,
    distributed: &StepState,
    oracle: &StepState,
    tolerance: f64,
) -> Result<ParityReport, OracleError> {
    let mut deviations = Vec::new();
    compare_sets(TensorRole::Param, &distributed.params, &oracle.params, &mut deviations)?;
    compare_sets(TensorRole::Grad, &distributed.grads, &oracle.grads, &mut deviations)?;
    Ok(ParityReport {
        step,
        tolerance,
        loss: distributed.loss,
        loss_dev: rel_dev(distributed.loss, oracle.loss),
        deviations,
    })
}

/// Per destination shard, the `(source shard, interval)` pieces forming it,
/// found by assigning every sample individually.
pub fn interval_oracle(
    batch: usize,
    dp_src: usize,
    dp_dst: usize,
) -> Result<Vec<Vec<(usize, BatchInterval)>>, GridError> {
    for dp in [dp_src, dp_dst] {
        if dp == 0 || batch % dp != 0 {
            return Err(GridError::IndivisibleBatch { batch, dp });
        }
    }
    let mut out: Vec<Vec<(usize, BatchInterval)>> = vec![Vec::new(); dp_dst];
    for j in 0..batch {
        let s = j * dp_src / batch;
        let d = j * dp_dst / batch;
        match out[d].last_mut() {
            Some((ls, iv)) if *ls == s && iv.end() == j => iv.len += 1,
            _ => out[d].push((s, BatchInterval::new(j, 1))),
        }
    }
    Ok(out)
}
