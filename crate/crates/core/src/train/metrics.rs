//! Block errors, challenging-sample selection and eigen-metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{predict_samples, Sample};
use crate::data::DatasetRecord;
use crate::model::{Model, OrbitalBasisSpec, PairBlockSet};
use crate::{Error, Result};

/// Share of samples counted as challenging.
pub const CHALLENGING_FRACTION: f64 = 0.05;

/// Eigenvalue gaps below this are treated as degenerate.
const DEGENERACY_GAP: f64 = 1e-9;

/// Largest tolerated `|H − Hᵀ|` entry for eigen-metrics.
const SYMMETRY_TOL: f64 = 1e-10;

/// MAE of one `(lp, lq)` block type.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMae {
    pub lp: usize,
    pub lq: usize,
    pub mae: f64,
}

/// Per-type block errors, in `(lp, lq)` order.
pub type BlockMaeTable = Vec<BlockMae>;

/// Metrics of one model on one dataset (energies in meV).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae_all: f64,
    /// MAE over the stored challenging samples, when a selection was given.
    pub mae_cha_s: Option<f64>,
    pub mae_cha_b: f64,
    pub mae_block: BlockMaeTable,
    pub mae_eps: f64,
    pub sim_psi: f64,
    /// MAE of every sample, in dataset order.
    pub per_sample: Vec<f64>,
}

impl MetricReport {
    /// `mae_cha_s`, or a usage error when no selection was supplied.
    pub fn cha_s(&self) -> Result<f64> {
        self.mae_cha_s
            .ok_or_else(|| Error::Usage("mae_cha_s needs a stored baseline selection".into()))
    }

    /// Per-type MAE as a matrix with rows `lp` and columns `lq`.
    pub fn block_matrix(&self) -> String {
        let lmax = self.mae_block.iter().map(|b| b.lp.max(b.lq)).max().unwrap_or(0);
        let mut s = String::from("lp\\lq");
        for lq in 0..=lmax {
            let _ = write!(s, "{lq:>12}");
        }
        s.push('\n');
        for lp in 0..=lmax {
            let _ = write!(s, "{lp:<5}");
            for lq in 0..=lmax {
                match self.mae_block.iter().find(|b| (b.lp, b.lq) == (lp, lq)) {
                    Some(b) => {
                        let _ = write!(s, "{:>12.4}", b.mae);
                    }
                    None => s.push_str(&format!("{:>12}", "-")),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Indices of the samples a baseline run found hardest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selection {
    pub fraction: f64,
    /// Size of the dataset the selection was made on.
    pub samples: usize,
    pub indices: Vec<usize>,
}

impl Selection {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("selection serialises");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// The worst `⌈fraction·n⌉` samples (at least one) by per-sample MAE;
/// ties go to the lower index.
pub fn make_selection(per_sample: &[f64], fraction: f64) -> Selection {
    let n = per_sample.len();
    let count = ((fraction * n as f64).ceil() as usize).clamp(1.min(n), n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| per_sample[b].total_cmp(&per_sample[a]).then(a.cmp(&b)));
    let mut indices = order[..count].to_vec();
    indices.sort_unstable();
    Selection {
        fraction,
        samples: n,
        indices,
    }
}

/// Dense symmetric matrix of a system, orbitals ordered by atom then shell.
pub fn assemble(basis: &OrbitalBasisSpec, species: &[usize], blocks: &PairBlockSet) -> DMatrix<f64> {
    let mut offsets = Vec::with_capacity(species.len());
    let mut n = 0;
    for &s in species {
        offsets.push(n);
        n += basis.n_orb(s);
    }
    let mut h = DMatrix::zeros(n, n);
    for (k, b) in blocks {
        let r0 = offsets[k.i] + basis.orb_offset(species[k.i], k.p);
        let c0 = offsets[k.j] + basis.orb_offset(species[k.j], k.q);
        for a in 0..b.rows() {
            for c in 0..b.cols() {
                h[(r0 + a, c0 + c)] = b.get(a, c);
            }
        }
    }
    h
}

/// `mae_eps` and `sim_psi` of one system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenMetrics {
    pub mae_eps: f64,
    pub sim_psi: f64,
}

fn sorted_eigen(h: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let e = SymmetricEigen::new(h.clone());
    let mut order: Vec<usize> = (0..h.nrows()).collect();
    order.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    let values = order.iter().map(|&k| e.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(h.nrows(), h.nrows(), |r, c| e.eigenvectors[(r, order[c])]);
    (values, vectors)
}

fn check_symmetric(h: &DMatrix<f64>, what: &str) -> Result<()> {
    if !h.is_square() {
        return Err(Error::param(format!("{what} matrix is not square")));
    }
    let asym = (h - h.transpose()).amax();
    if asym > SYMMETRY_TOL {
        return Err(Error::param(format!("{what} matrix is asymmetric by {asym:e}")));
    }
    Ok(())
}

/// Errors of the lowest `m` eigenpairs of `pred` against `target`.
///
/// `sim_psi` averages `|⟨ψ̂_k, ψ*_k⟩|` over the `m` states. Within a group of
/// target eigenvalues closer than 1e-9 the cosines of the principal angles
/// between the two spanned subspaces are used instead, since individual
/// vectors there are not unique.
pub fn eigen_metrics(pred: &DMatrix<f64>, target: &DMatrix<f64>, m: usize) -> Result<EigenMetrics> {
    check_symmetric(pred, "predicted")?;
    check_symmetric(target, "target")?;
    if pred.shape() != target.shape() {
        return Err(Error::param("predicted and target matrices differ in size"));
    }
    let n = pred.nrows();
    if m == 0 || m > n {
        return Err(Error::param(format!("occupied count {m} outside 1..={n}")));
    }
    let (ep, vp) = sorted_eigen(pred);
    let (et, vt) = sorted_eigen(target);
    let mae_eps = (0..m).map(|k| (ep[k] - et[k]).abs()).sum::<f64>() / m as f64;
    let mut sim = 0.0;
    let mut start = 0;
    while start < m {
        let mut end = start + 1;
        while end < m && (et[end] - et[end - 1]).abs() < DEGENERACY_GAP {
            end += 1;
        }
        if end - start == 1 {
            sim += vp.column(start).dot(&vt.column(start)).abs();
        } else {
            let overlap = vp.columns(start, end - start).transpose() * vt.columns(start, end - start);
            sim += overlap.singular_values().iter().map(|s| s.min(1.0)).sum::<f64>();
        }
        start = end;
    }
    Ok(EigenMetrics {
        mae_eps,
        sim_psi: sim / m as f64,
    })
}

/// Occupied-state count: half the orbitals, at least one.
fn occupied(n_orb: usize) -> usize {
    (n_orb / 2).max(1)
}

/// Metrics of given predictions against a dataset.
pub fn evaluate_predictions(
    basis: &OrbitalBasisSpec,
    records: &[DatasetRecord],
    preds: &[PairBlockSet],
    selection: Option<&Selection>,
) -> Result<MetricReport> {
    if records.len() != preds.len() {
        return Err(Error::param("one prediction per record needed"));
    }
    if records.is_empty() {
        return Err(Error::param("empty dataset"));
    }
    if let Some(sel) = selection {
        if sel.samples != records.len() || sel.indices.iter().any(|&k| k >= records.len()) {
            return Err(Error::Usage(format!(
                "selection was made on {} samples but the dataset has {}",
                sel.samples,
                records.len()
            )));
        }
    }
    struct One {
        sum: f64,
        count: f64,
        per_type: BTreeMap<(usize, usize), (f64, f64)>,
        eig: EigenMetrics,
    }
    let rows: Vec<One> = records
        .par_iter()
        .zip(preds)
        .map(|(r, p)| {
            let mut one = One {
                sum: 0.0,
                count: 0.0,
                per_type: BTreeMap::new(),
                eig: EigenMetrics { mae_eps: 0.0, sim_psi: 0.0 },
            };
            for (k, b) in &r.blocks {
                let q = p
                    .get(k)
                    .ok_or_else(|| Error::param(format!("prediction lacks block {k:?}")))?;
                let e: f64 = b.data().iter().zip(q.data()).map(|(x, y)| (x - y).abs()).sum();
                let n = b.data().len() as f64;
                one.sum += e;
                one.count += n;
                let t = one.per_type.entry((b.lp, b.lq)).or_insert((0.0, 0.0));
                t.0 += e;
                t.1 += n;
            }
            let ht = assemble(basis, &r.system.species, &r.blocks);
            let hp = assemble(basis, &r.system.species, p);
            one.eig = eigen_metrics(&hp, &ht, occupied(ht.nrows()))?;
            Ok(one)
        })
        .collect::<Result<_>>()?;
    let (mut sum, mut count) = (0.0, 0.0);
    let mut per_type: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for one in &rows {
        sum += one.sum;
        count += one.count;
        for (k, (e, n)) in &one.per_type {
            let t = per_type.entry(*k).or_insert((0.0, 0.0));
            t.0 += e;
            t.1 += n;
        }
    }
    let mae_block: BlockMaeTable = per_type
        .into_iter()
        .map(|((lp, lq), (e, n))| BlockMae { lp, lq, mae: e / n })
        .collect();
    let mae_cha_s = selection.map(|sel| {
        let (e, n) = sel
            .indices
            .iter()
            .fold((0.0, 0.0), |(e, n), &k| (e + rows[k].sum, n + rows[k].count));
        e / n
    });
    let ns = rows.len() as f64;
    Ok(MetricReport {
        mae_all: sum / count,
        mae_cha_s,
        mae_cha_b: mae_block.iter().map(|b| b.mae).fold(0.0, f64::max),
        mae_block,
        mae_eps: rows.iter().map(|o| o.eig.mae_eps).sum::<f64>() / ns,
        sim_psi: rows.iter().map(|o| o.eig.sim_psi).sum::<f64>() / ns,
        per_sample: rows.iter().map(|o| o.sum / o.count).collect(),
    })
}

/// Predict every record and compute its metrics.
pub fn evaluate(model: &Model, records: &[DatasetRecord], selection: Option<&Selection>) -> Result<MetricReport> {
    let preds = predict_records(model, records)?;
    evaluate_predictions(&model.config().basis, records, &preds, selection)
}

/// Per-sample MAE of a model, in dataset order.
pub fn per_sample_mae(model: &Model, records: &[DatasetRecord]) -> Result<Vec<f64>> {
    Ok(evaluate(model, records, None)?.per_sample)
}

/// Block predictions of a model for every record.
pub fn predict_records(model: &Model, records: &[DatasetRecord]) -> Result<Vec<PairBlockSet>> {
    let samples: Vec<Sample> = super::prepare_samples(model, records)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let raw = predict_samples(model, &refs, 32)?;
    samples
        .iter()
        .zip(&raw)
        .map(|(s, (h, _))| Ok(model.unpack(&s.prep, h, None)?.blocks))
        .collect()
}
