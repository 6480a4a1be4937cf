//! Loss, optimisation and evaluation.
//!
//! The objective is `loss_H + μ·loss_T` with `loss_H` the mean squared block
//! error, `loss_T` the mean absolute trace error and
//! `μ = λ·loss_H/loss_T` treated as a constant when differentiating.

mod ablation;
mod metrics;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ablation::{lambda_sweep, run_ablation, AblationRow, Arm, SweepPoint};
pub use metrics::{
    assemble, eigen_metrics, evaluate, evaluate_predictions, make_selection, per_sample_mae, predict_records, BlockMae,
    BlockMaeTable, EigenMetrics, MetricReport, Selection, CHALLENGING_FRACTION,
};

use crate::autodiff::{Mat, Node, Tape};
use crate::data::DatasetRecord;
use crate::model::{ForwardOut, Model, Prepared};
use crate::params::derive_seed;
use crate::{Error, Result};

/// Optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the trace term; 0 trains on blocks alone.
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Systems per optimiser step.
    pub batch: usize,
    /// Systems per tape inside a step. Fixed chunking keeps the reduction
    /// order, and so the result, independent of the thread count.
    pub chunk: usize,
    pub seed: u64,
    /// Halve the learning rate after this many epochs without validation
    /// improvement; 0 disables the decay.
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.3,
            lr: 5e-3,
            epochs: 400,
            batch: 32,
            chunk: 32,
            seed: 0,
            patience: 0,
            min_lr: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.chunk == 0 {
            return Err(Error::Config("batch and chunk must be positive".into()));
        }
        if !(self.min_lr >= 0.0) {
            return Err(Error::Config("min_lr must be non-negative".into()));
        }
        Ok(())
    }
}

/// Padded targets of a system or a batch, aligned with [`ForwardOut`].
#[derive(Clone, Debug)]
pub struct Targets {
    pub h: Mat,
    pub h_mask: Mat,
    pub t: Mat,
    pub t_mask: Mat,
}

impl Targets {
    pub fn concat(parts: &[&Targets]) -> Targets {
        let pick = |f: &dyn Fn(&Targets) -> &Mat| Mat::vstack(&parts.iter().map(|p| f(p)).collect::<Vec<_>>());
        Targets {
            h: pick(&|t| &t.h),
            h_mask: pick(&|t| &t.h_mask),
            t: pick(&|t| &t.t),
            t_mask: pick(&|t| &t.t_mask),
        }
    }

    fn counts(&self) -> (f64, f64) {
        (self.h_mask.data().iter().sum(), self.t_mask.data().iter().sum())
    }
}

/// A record prepared for a particular model.
#[derive(Clone, Debug)]
pub struct Sample {
    pub prep: Prepared,
    pub targets: Targets,
}

impl Sample {
    pub fn new(model: &Model, record: &DatasetRecord) -> Result<Self> {
        let prep = model.prepare(&record.system)?;
        let (h, h_mask, t, t_mask) = model.pack_targets(&prep, &record.blocks, &record.trace_values())?;
        Ok(Sample {
            prep,
            targets: Targets { h, h_mask, t, t_mask },
        })
    }

    pub fn batch(parts: &[&Sample]) -> Sample {
        Sample {
            prep: Prepared::concat(&parts.iter().map(|s| &s.prep).collect::<Vec<_>>()),
            targets: Targets::concat(&parts.iter().map(|s| &s.targets).collect::<Vec<_>>()),
        }
    }
}

/// Prepare every record, in parallel.
pub fn prepare_samples(model: &Model, records: &[DatasetRecord]) -> Result<Vec<Sample>> {
    records.par_iter().map(|r| Sample::new(model, r)).collect()
}

/// Values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_h: f64,
    pub loss_t: f64,
    pub mu: f64,
    pub total: f64,
}

/// Loss nodes recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub loss_h: Node,
    /// Absent when the model has no trace head.
    pub loss_t: Option<Node>,
    pub mu: Node,
    pub total: Node,
}

impl LossNodes {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            loss_h: tape.value(self.loss_h).item(),
            loss_t: self.loss_t.map_or(0.0, |n| tape.value(n).item()),
            mu: tape.value(self.mu).item(),
            total: tape.value(self.total).item(),
        }
    }
}

/// Sum of `mask ⊙ (pred − target)²` and of `mask ⊙ |pred − target|`.
fn masked_sums(tape: &mut Tape, out: &ForwardOut, targets: &Targets) -> Result<(Node, Option<Node>)> {
    let check = |tape: &Tape, n: Node, m: &Mat, what: &str| {
        if tape.shape(n) != m.shape() {
            return Err(Error::param(format!(
                "{what} prediction {:?} and target {:?} differ in shape",
                tape.shape(n),
                m.shape()
            )));
        }
        Ok(())
    };
    check(tape, out.h, &targets.h, "block")?;
    let th = tape.constant(targets.h.clone());
    let d = tape.sub(out.h, th)?;
    let sq = tape.mul(d, d)?;
    let mh = tape.constant(targets.h_mask.clone());
    let sq = tape.mul(sq, mh)?;
    let sh = tape.sum(sq)?;
    let st = match out.t {
        Some(t) => {
            check(tape, t, &targets.t, "trace")?;
            let tt = tape.constant(targets.t.clone());
            let d = tape.sub(t, tt)?;
            let a = tape.abs(d)?;
            let mt = tape.constant(targets.t_mask.clone());
            let a = tape.mul(a, mt)?;
            Some(tape.sum(a)?)
        }
        None => None,
    };
    Ok((sh, st))
}

/// `total = loss_H + μ·loss_T` with `μ = λ·detach(loss_H/loss_T)`.
///
/// When `loss_T` is exactly zero, or the model has no trace head, `μ = 0`.
pub fn compute_loss(tape: &mut Tape, out: &ForwardOut, targets: &Targets, lambda: f64) -> Result<LossNodes> {
    let (nh, nt) = targets.counts();
    if nh == 0.0 {
        return Err(Error::param("no target block entries"));
    }
    let (sh, st) = masked_sums(tape, out, targets)?;
    let loss_h = tape.scale(sh, 1.0 / nh)?;
    let Some(st) = st else {
        let mu = tape.constant(Mat::scalar(0.0));
        return Ok(LossNodes {
            loss_h,
            loss_t: None,
            mu,
            total: loss_h,
        });
    };
    let loss_t = tape.scale(st, 1.0 / nt.max(1.0))?;
    let mu = if tape.value(loss_t).item() == 0.0 || lambda == 0.0 {
        tape.constant(Mat::scalar(0.0))
    } else {
        let inv = tape.powf(loss_t, -1.0)?;
        let ratio = tape.mul(loss_h, inv)?;
        let ratio = tape.detach(ratio)?;
        tape.scale(ratio, lambda)?
    };
    let weighted = tape.mul(mu, loss_t)?;
    let total = tape.add(loss_h, weighted)?;
    Ok(LossNodes {
        loss_h,
        loss_t: Some(loss_t),
        mu,
        total,
    })
}

/// Loss and parameter gradients of one optimiser step over `samples`.
///
/// Each chunk gets its own tape. Block and trace error sums from all chunks
/// give the batch `μ`; every chunk then differentiates its share
/// `Σ_H/N_H + μ·Σ_T/N_T` and the gradients are added in chunk order.
pub fn batch_gradient(model: &Model, samples: &[&Sample], chunk: usize, lambda: f64) -> Result<(LossBreakdown, Vec<Mat>)> {
    struct Part {
        tape: Tape,
        params: Vec<Node>,
        sh: Node,
        st: Option<Node>,
    }
    let parts: Vec<Part> = samples
        .par_chunks(chunk.max(1))
        .map(|c| {
            let batch = Sample::batch(c);
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape);
            let out = model.forward(&mut tape, &bound, &batch.prep)?;
            let (sh, st) = masked_sums(&mut tape, &out, &batch.targets)?;
            Ok(Part {
                tape,
                params: bound.nodes().to_vec(),
                sh,
                st,
            })
        })
        .collect::<Result<_>>()?;
    let (mut nh, mut nt) = (0.0, 0.0);
    for s in samples {
        let (a, b) = s.targets.counts();
        nh += a;
        nt += b;
    }
    if nh == 0.0 {
        return Err(Error::param("no target block entries"));
    }
    let sum_h: f64 = parts.iter().map(|p| p.tape.value(p.sh).item()).sum();
    let sum_t: f64 = parts.iter().map(|p| p.st.map_or(0.0, |n| p.tape.value(n).item())).sum();
    let loss_h = sum_h / nh;
    let loss_t = if nt > 0.0 { sum_t / nt } else { 0.0 };
    let mu = if loss_t == 0.0 { 0.0 } else { lambda * (loss_h / loss_t) };
    let grads: Vec<Vec<Mat>> = parts
        .into_par_iter()
        .map(|mut p| {
            let mut share = p.tape.scale(p.sh, 1.0 / nh)?;
            if let (Some(st), true) = (p.st, mu != 0.0) {
                let t = p.tape.scale(st, mu / nt)?;
                share = p.tape.add(share, t)?;
            }
            p.tape.backward(share, &p.params)
        })
        .collect::<Result<_>>()?;
    let mut total = grads.into_iter();
    let mut acc = total.next().unwrap_or_default();
    for g in total {
        for (a, b) in acc.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    Ok((
        LossBreakdown {
            loss_h,
            loss_t,
            mu,
            total: loss_h + mu * loss_t,
        },
        acc,
    ))
}

/// Block and trace predictions for many samples, computed chunk by chunk.
pub fn predict_samples(model: &Model, samples: &[&Sample], chunk: usize) -> Result<Vec<(Mat, Option<Mat>)>> {
    let per_chunk: Vec<Vec<(Mat, Option<Mat>)>> = samples
        .par_chunks(chunk.max(1))
        .map(|c| {
            let batch = Sample::batch(c);
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape);
            let out = model.forward(&mut tape, &bound, &batch.prep)?;
            let h = tape.value(out.h);
            let t = out.t.map(|t| tape.value(t));
            let mut row = 0;
            let mut res = Vec::with_capacity(c.len());
            for s in c {
                let e = s.prep.graph.len();
                let take = |m: &Mat| Mat::new(e, m.cols(), m.data()[row * m.cols()..(row + e) * m.cols()].to_vec());
                res.push((take(h), t.map(take)));
                row += e;
            }
            Ok(res)
        })
        .collect::<Result<_>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// Loss of the current parameters over a sample set, no update.
pub fn evaluate_loss(model: &Model, samples: &[&Sample], chunk: usize, lambda: f64) -> Result<LossBreakdown> {
    let preds = predict_samples(model, samples, chunk)?;
    let (mut sh, mut st, mut nh, mut nt) = (0.0, 0.0, 0.0, 0.0);
    for (s, (h, t)) in samples.iter().zip(&preds) {
        let g = &s.targets;
        for ((p, y), m) in h.data().iter().zip(g.h.data()).zip(g.h_mask.data()) {
            sh += m * (p - y) * (p - y);
        }
        if let Some(t) = t {
            for ((p, y), m) in t.data().iter().zip(g.t.data()).zip(g.t_mask.data()) {
                st += m * (p - y).abs();
            }
        }
        let (a, b) = g.counts();
        nh += a;
        nt += b;
    }
    let loss_h = sh / nh.max(1.0);
    let has_t = preds.first().is_some_and(|p| p.1.is_some());
    let loss_t = if has_t && nt > 0.0 { st / nt } else { 0.0 };
    let mu = if loss_t == 0.0 { 0.0 } else { lambda * loss_h / loss_t };
    Ok(LossBreakdown {
        loss_h,
        loss_t,
        mu,
        total: loss_h + mu * loss_t,
    })
}

/// Mean absolute block error over all real entries of a sample set.
pub fn mae_all(model: &Model, samples: &[&Sample], chunk: usize) -> Result<f64> {
    let preds = predict_samples(model, samples, chunk)?;
    let (mut s, mut n) = (0.0, 0.0);
    for (smp, (h, _)) in samples.iter().zip(&preds) {
        let g = &smp.targets;
        for ((p, y), m) in h.data().iter().zip(g.h.data()).zip(g.h_mask.data()) {
            s += m * (p - y).abs();
            n += m;
        }
    }
    Ok(s / n.max(1.0))
}

/// Adam with `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Adam {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Update `params` in place from gradients laid out in the same order.
    pub fn update(&mut self, params: &mut [Mat], grads: &[Mat], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let c2 = 1.0 - Self::BETA2.powi(self.step as i32);
        let mut k = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (x, &gr) in p.data_mut().iter_mut().zip(g.data()) {
                self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * gr;
                self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * gr * gr;
                let mh = self.m[k] / c1;
                let vh = self.v[k] / c2;
                *x -= lr * mh / (vh.sqrt() + Self::EPS);
                k += 1;
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_h: f64,
    pub loss_t: f64,
    pub mu: f64,
    pub total: f64,
    pub val_mae_all: Option<f64>,
    pub lr: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub lr: f64,
    pub params: Vec<f64>,
    pub adam: Adam,
    pub best_params: Vec<f64>,
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub stale_epochs: usize,
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Loss over the training set before the first update.
    pub initial: LossBreakdown,
    pub epochs: Vec<EpochLog>,
    pub state: TrainState,
}

/// Train `model` in place. On return it holds the parameters with the best
/// validation `mae_all` (the last ones if there is no validation set).
///
/// `resume` continues a previous run; `cfg.epochs` counts total epochs.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::param("empty training set"));
    }
    if cfg.lambda > 0.0 && !model.config().trace_head {
        return Err(Error::Config("lambda > 0 needs a model with a trace head".into()));
    }
    let n_params = model.params().scalar_count();
    let mut state = match resume {
        Some(s) => {
            if s.params.len() != n_params || s.adam.m.len() != n_params {
                return Err(Error::Config("resume state does not match the model".into()));
            }
            model.params_mut().set_flat(&s.params)?;
            s
        }
        None => TrainState {
            epoch: 0,
            lr: cfg.lr,
            params: model.params().flat(),
            adam: Adam::new(n_params),
            best_params: model.params().flat(),
            best_val: None,
            best_epoch: 0,
            stale_epochs: 0,
        },
    };
    let train_refs: Vec<&Sample> = train_set.iter().collect();
    let val_refs: Vec<&Sample> = val_set.iter().collect();
    let initial = evaluate_loss(model, &train_refs, cfg.chunk, cfg.lambda)?;
    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("epoch.{epoch}"))));
        let mut sums = LossBreakdown::default();
        let mut batches = 0.0;
        for idx in order.chunks(cfg.batch) {
            let batch: Vec<&Sample> = idx.iter().map(|&k| &train_set[k]).collect();
            let (loss, grads) = batch_gradient(model, &batch, cfg.chunk, cfg.lambda)?;
            let bad_grad = grads.iter().flat_map(|g| g.data()).any(|x| !x.is_finite());
            if !loss.total.is_finite() || bad_grad {
                return Err(Error::Divergence {
                    epoch,
                    message: format!("non-finite loss or gradient (loss_H = {})", loss.loss_h),
                });
            }
            state.adam.update(model.params_mut().mats_mut(), &grads, state.lr);
            sums.loss_h += loss.loss_h;
            sums.loss_t += loss.loss_t;
            sums.mu += loss.mu;
            sums.total += loss.total;
            batches += 1.0;
        }
        let val = if val_refs.is_empty() {
            None
        } else {
            Some(mae_all(model, &val_refs, cfg.chunk)?)
        };
        match val {
            Some(v) if state.best_val.is_none_or(|b| v < b) => {
                state.best_val = Some(v);
                state.best_params = model.params().flat();
                state.best_epoch = epoch;
                state.stale_epochs = 0;
            }
            Some(_) => {
                state.stale_epochs += 1;
                if cfg.patience > 0 && state.stale_epochs >= cfg.patience {
                    state.lr = (state.lr * 0.5).max(cfg.min_lr);
                    state.stale_epochs = 0;
                }
            }
            None => {
                state.best_params = model.params().flat();
                state.best_epoch = epoch;
            }
        }
        let entry = EpochLog {
            epoch,
            loss_h: sums.loss_h / batches,
            loss_t: sums.loss_t / batches,
            mu: sums.mu / batches,
            total: sums.total / batches,
            val_mae_all: val,
            lr: state.lr,
        };
        on_epoch(&entry);
        log.push(entry);
        state.epoch = epoch;
    }
    state.params = model.params().flat();
    model.params_mut().set_flat(&state.best_params)?;
    Ok(TrainReport {
        initial,
        epochs: log,
        state,
    })
}

/// Metadata stored with a trained checkpoint.
pub fn checkpoint_metadata(cfg: &TrainConfig, report: &TrainReport) -> BTreeMap<String, serde_json::Value> {
    let mut m = BTreeMap::new();
    m.insert("lambda".into(), serde_json::json!(cfg.lambda));
    m.insert("train_config".into(), serde_json::to_value(cfg).expect("config serialises"));
    m.insert("epochs_completed".into(), serde_json::json!(report.state.epoch));
    m.insert("best_epoch".into(), serde_json::json!(report.state.best_epoch));
    m.insert("best_val_mae_all".into(), serde_json::json!(report.state.best_val));
    m
}

#[cfg(test)]
mod tests;
