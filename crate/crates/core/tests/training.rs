//! End-to-end training on a small synthetic set.

use tracegrad::data::{generate_splits, OracleParams, SizeRange, SplitPlan, DEFAULT_CUTOFF, DEFAULT_SCALE};
use tracegrad::block::Mode;
use tracegrad::model::{Model, ModelConfig, OrbitalBasisSpec};
use tracegrad::train::{evaluate, prepare_samples, train, TrainConfig};

fn small_config(mode: Mode, trace_head: bool) -> ModelConfig {
    ModelConfig {
        k: 1,
        spec: "0x4+1x4+2x2".parse().unwrap(),
        radial_bins: 8,
        radial_hidden: 16,
        channels: 16,
        head_hidden: 16,
        trace_hidden: 16,
        mode,
        trace_head,
        ..ModelConfig::default()
    }
}

#[test]
fn training_reduces_the_block_loss_tenfold() {
    let oracle = OracleParams::new(OrbitalBasisSpec::default(), 7, DEFAULT_SCALE).unwrap();
    let plan = SplitPlan::iid(64, 16, 0, SizeRange::new(4, 10).unwrap());
    let records = generate_splits(&oracle, &plan, DEFAULT_CUTOFF, 7).unwrap();
    let (tr, va): (Vec<_>, Vec<_>) = records.iter().cloned().partition(|r| r.split == tracegrad::data::Split::Train);
    let mut model = Model::new(small_config(Mode::Grad, true), 0).unwrap();
    let ts = prepare_samples(&model, &tr).unwrap();
    let vs = prepare_samples(&model, &va).unwrap();
    let tc = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &ts, &vs, &tc, None, |_| {}).unwrap();
    let last = report.epochs.last().unwrap();
    assert!(
        last.loss_h * 10.0 <= report.initial.loss_h,
        "loss_H {} -> {}",
        report.initial.loss_h,
        last.loss_h
    );
    assert!(last.loss_t.is_finite() && last.mu >= 0.0);
    // The restored best parameters reproduce the logged validation error.
    let best = report.state.best_val.unwrap();
    let val = evaluate(&model, &va, None).unwrap().mae_all;
    assert!((val - best).abs() <= 1e-9 * best.max(1.0), "{val} vs {best}");
}
