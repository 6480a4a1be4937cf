//! Controlled comparisons: the six ablation arms and the λ sweep.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, make_selection, MetricReport, Selection, CHALLENGING_FRACTION};
use super::{prepare_samples, train, TrainConfig};
use crate::block::Mode;
use crate::data::{DatasetRecord, Split};
use crate::model::{Model, ModelConfig};
use crate::{Error, Result};

/// One arm of the ablation: a block mode with or without trace supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    Baseline,
    Trace,
    Gate,
    Grad,
    TraceGate,
    TraceGrad,
}

impl Arm {
    pub const ALL: [Arm; 6] = [Arm::Baseline, Arm::Trace, Arm::Gate, Arm::Grad, Arm::TraceGate, Arm::TraceGrad];

    pub fn mode(self) -> Mode {
        match self {
            Arm::Baseline | Arm::Trace => Mode::Off,
            Arm::Gate | Arm::TraceGate => Mode::Gate,
            Arm::Grad | Arm::TraceGrad => Mode::Grad,
        }
    }

    pub fn uses_trace(self) -> bool {
        matches!(self, Arm::Trace | Arm::TraceGate | Arm::TraceGrad)
    }

    /// Model and training settings of this arm, derived from shared bases.
    pub fn configure(self, model: &ModelConfig, train: &TrainConfig, lambda_star: f64) -> (ModelConfig, TrainConfig) {
        let m = ModelConfig {
            mode: self.mode(),
            trace_head: self.uses_trace(),
            ..model.clone()
        };
        let t = TrainConfig {
            lambda: if self.uses_trace() { lambda_star } else { 0.0 },
            ..train.clone()
        };
        (m, t)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Baseline => "baseline",
            Arm::Trace => "+Trace",
            Arm::Gate => "+Gate",
            Arm::Grad => "+Grad",
            Arm::TraceGate => "+TraceGate",
            Arm::TraceGrad => "+TraceGrad",
        })
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim_start_matches('+').to_ascii_lowercase();
        Ok(match key.as_str() {
            "baseline" => Arm::Baseline,
            "trace" => Arm::Trace,
            "gate" => Arm::Gate,
            "grad" => Arm::Grad,
            "tracegate" => Arm::TraceGate,
            "tracegrad" => Arm::TraceGrad,
            _ => return Err(Error::Config(format!("unknown ablation arm `{s}`"))),
        })
    }
}

/// Result of one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub seed: u64,
    /// Training-set `loss_H` before the first update.
    pub initial_loss_h: f64,
    pub best_epoch: usize,
    pub test: MetricReport,
}

fn split(records: &[DatasetRecord], s: Split) -> Vec<DatasetRecord> {
    records.iter().filter(|r| r.split == s).cloned().collect()
}

/// Train and test every arm with the same seed, data and budget.
///
/// `records` holds all three splits. Without a stored `selection` the
/// challenging samples are taken from the baseline arm's test errors, so the
/// baseline must then be among `arms`; it is run first.
pub fn run_ablation(
    records: &[DatasetRecord],
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    lambda_star: f64,
    arms: &[Arm],
    selection: Option<&Selection>,
    mut progress: impl FnMut(Arm, &super::EpochLog),
) -> Result<(Vec<AblationRow>, Option<Selection>)> {
    let (tr, va, te) = (
        split(records, Split::Train),
        split(records, Split::Val),
        split(records, Split::Test),
    );
    if tr.is_empty() || te.is_empty() {
        return Err(Error::param("ablation needs train and test records"));
    }
    let mut order: Vec<Arm> = arms.to_vec();
    order.sort();
    order.dedup();
    let mut sel = selection.cloned();
    let mut rows = Vec::new();
    for arm in order {
        let (mc, tc) = arm.configure(model, train_cfg, lambda_star);
        let mut m = Model::new(mc, tc.seed)?;
        let ts = prepare_samples(&m, &tr)?;
        let vs = prepare_samples(&m, &va)?;
        let report = train(&mut m, &ts, &vs, &tc, None, |e| progress(arm, e))?;
        if arm == Arm::Baseline && sel.is_none() {
            let base = evaluate(&m, &te, None)?;
            sel = Some(make_selection(&base.per_sample, CHALLENGING_FRACTION));
        }
        let test = evaluate(&m, &te, sel.as_ref())?;
        rows.push(AblationRow {
            arm,
            seed: tc.seed,
            initial_loss_h: report.initial.loss_h,
            best_epoch: report.state.best_epoch,
            test,
        });
    }
    Ok((rows, sel))
}

/// Validation error of the full method for one λ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub val_mae_all: f64,
}

/// Train the trace-supervised gradient arm for each λ and record the best
/// validation `mae_all`.
pub fn lambda_sweep(
    records: &[DatasetRecord],
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    lambdas: &[f64],
) -> Result<Vec<SweepPoint>> {
    let (tr, va) = (split(records, Split::Train), split(records, Split::Val));
    if va.is_empty() {
        return Err(Error::param("the λ sweep needs validation records"));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let (mc, tc) = Arm::TraceGrad.configure(model, train_cfg, lambda);
            let mut m = Model::new(mc, tc.seed)?;
            let ts = prepare_samples(&m, &tr)?;
            let vs = prepare_samples(&m, &va)?;
            let report = train(&mut m, &ts, &vs, &tc, None, |_| {})?;
            Ok(SweepPoint {
                lambda,
                val_mae_all: report.state.best_val.unwrap_or(f64::NAN),
            })
        })
        .collect()
}
