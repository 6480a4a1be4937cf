//! Randomised property suites behind the `check` command.
//!
//! Each suite draws its own trials from a seed and reports the worst residual
//! per property together with the tolerance it must meet.

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, Mat, Tape};
use crate::block::{cg_decomp_ext, grad_induce, s_nonlin, BlockParams, DirectSumSpec};
use crate::data::{oracle_blocks, read_dataset, sample_geometry, OracleParams, DEFAULT_CUTOFF, DEFAULT_SCALE};
use crate::model::{hermiticity_residual, AtomicSystem, OrbitalBasisSpec};
use crate::params::{derive_seed, ParamStore};
use crate::so3::{cg_decompose, cg_recompose, coupling, real_sph_harm, trace_label, wigner_d, HamiltonianBlock, Rotation, L_MAX};
use crate::Result;

/// A deliberate defect for exercising the suites' ability to fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Use `Dᵀ` wherever the suite needs a Wigner-D matrix.
    TransposedWigner,
}

/// Worst residual of one property.
#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub suite: &'static str,
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
    pub trials: usize,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.worst <= self.tol
    }
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<5} {:<4} {:<26} worst {:.3e}  tol {:.0e}  trials {}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.worst,
            self.tol,
            self.trials
        )
    }
}

/// Options shared by all suites.
#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub seed: u64,
    pub trials: usize,
    pub fault: Option<Fault>,
}

struct Tracker {
    suite: &'static str,
    trials: usize,
    rows: Vec<PropertyResult>,
}

impl Tracker {
    fn new(suite: &'static str, trials: usize) -> Self {
        Tracker {
            suite,
            trials,
            rows: Vec::new(),
        }
    }

    fn record(&mut self, name: &'static str, tol: f64, value: f64) {
        // NaN must count as a failure, so it replaces any finite worst.
        let v = if value.is_nan() { f64::INFINITY } else { value };
        match self.rows.iter_mut().find(|r| r.name == name) {
            Some(r) => r.worst = r.worst.max(v),
            None => self.rows.push(PropertyResult {
                suite: self.suite,
                name,
                worst: v,
                tol,
                trials: self.trials,
            }),
        }
    }
}

fn rng_for(opts: &CheckOptions, suite: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, suite))
}

fn wigner(l: usize, r: &Rotation, fault: Option<Fault>) -> Result<DMatrix<f64>> {
    let d = wigner_d(l, r)?.matrix;
    Ok(match fault {
        Some(Fault::TransposedWigner) => d.transpose(),
        None => d,
    })
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn random_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn unit_vector<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Wigner-D, spherical harmonics and the trace label.
pub fn so3_suite(opts: &CheckOptions) -> Result<Vec<PropertyResult>> {
    let mut t = Tracker::new("so3", opts.trials);
    let mut rng = rng_for(opts, "check.so3");
    for _ in 0..opts.trials {
        let (r1, r2) = (Rotation::sample(&mut rng), Rotation::sample(&mut rng));
        let u = unit_vector(&mut rng);
        for l in 0..=L_MAX {
            let (d1, d2) = (wigner(l, &r1, opts.fault)?, wigner(l, &r2, opts.fault)?);
            let d12 = wigner(l, &r1.compose(&r2), opts.fault)?;
            t.record("wigner_homomorphism", 1e-10, max_abs(&(&d12 - &d1 * &d2)));
            let n = 2 * l + 1;
            t.record("wigner_orthogonality", 1e-10, max_abs(&(&d1 * d1.transpose() - DMatrix::identity(n, n))));
            let y = DMatrix::from_vec(n, 1, real_sph_harm(l, u)?);
            let yr = DMatrix::from_vec(n, 1, real_sph_harm(l, r1.apply(u))?);
            t.record("sph_harm_equivariance", 1e-10, max_abs(&(yr - &d1 * y)));
        }
        for lp in 0..=2 {
            for lq in 0..=2 {
                let (np, nq) = (2 * lp + 1, 2 * lq + 1);
                let h = DMatrix::from_vec(np, nq, random_vec(&mut rng, np * nq));
                let hr = wigner(lp, &r1, opts.fault)? * &h * wigner(lq, &r1, opts.fault)?.transpose();
                let (a, b) = (h.iter().map(|x| x * x).sum::<f64>(), hr.iter().map(|x| x * x).sum::<f64>());
                t.record("trace_invariance", 1e-10, (b - a).abs() / a.max(1e-12));
                // Dyadic entries keep every product and partial sum exact.
                let exact: Vec<f64> = (0..np * nq).map(|_| rng.random_range(-64i32..=64) as f64 / 16.0).collect();
                let blk = HamiltonianBlock::new(lp, lq, exact)?;
                let base = trace_label(&blk).0;
                for s in [0.0, 1.0, -1.0, 2.5] {
                    t.record("trace_homogeneity", 0.0, (trace_label(&blk.scaled(s)).0 - s * s * base).abs());
                }
            }
        }
    }
    Ok(t.rows)
}

/// Clebsch-Gordan decomposition.
pub fn cg_suite(opts: &CheckOptions) -> Result<Vec<PropertyResult>> {
    let mut t = Tracker::new("cg", opts.trials);
    let mut rng = rng_for(opts, "check.cg");
    for lp in 0..=2 {
        for lq in 0..=2 {
            let np = (2 * lp + 1) * (2 * lq + 1);
            let mut stacked = DMatrix::zeros(np, np);
            let mut row = 0;
            for l in lp.abs_diff(lq)..=lp + lq {
                let c = coupling(l, lp, lq)?.as_matrix();
                stacked.rows_mut(row, c.nrows()).copy_from(&c);
                row += c.nrows();
            }
            let err = max_abs(&(&stacked * stacked.transpose() - DMatrix::identity(np, np)));
            t.record("cg_orthogonality", 1e-12, err);
        }
    }
    for _ in 0..opts.trials {
        let r = Rotation::sample(&mut rng);
        for lp in 0..=2 {
            for lq in 0..=2 {
                let n = (2 * lp + 1) * (2 * lq + 1);
                let h = HamiltonianBlock::new(lp, lq, random_vec(&mut rng, n))?;
                let comps = cg_decompose(&h)?;
                let back = cg_recompose(&comps, lp, lq)?;
                let rt = h.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                t.record("cg_round_trip", 1e-12, rt);
                let rot = cg_decompose(&h.rotated(&r)?)?;
                for (l, x) in &comps {
                    let dx = wigner_d(*l, &r)?.apply(x);
                    let e = dx.iter().zip(&rot[l]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    t.record("cg_equivariance", 1e-10, e);
                }
            }
        }
    }
    Ok(t.rows)
}

const GRAD_SPECS: [&str; 3] = ["0x2+1x2+2x1", "1x3+2x2", "0x1+1x1+2x1+3x1+4x1"];

fn random_block(seed: u64, spec: &DirectSumSpec) -> Result<(ParamStore, BlockParams)> {
    let mut store = ParamStore::new(seed);
    let p = BlockParams::new(&mut store, "blk", spec, 5, 6, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let gain = store.name(id).contains("gain");
        for v in store.get_mut(id).data_mut() {
            *v = if gain { rng.random_range(0.5..1.5) } else { rng.random_range(-0.6..0.6) };
        }
    }
    Ok((store, p))
}

/// `(v, u, z)` of one feature row.
fn induce(store: &ParamStore, p: &BlockParams, x: &Mat) -> Result<(Mat, Mat, Mat)> {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let f = tape.leaf(x.clone());
    let u = cg_decomp_ext(&mut tape, &b, p, f)?;
    let z = s_nonlin(&mut tape, &b, p, u)?;
    let v = grad_induce(&mut tape, &b, p, f)?;
    Ok((tape.value(v).clone(), tape.value(u).clone(), tape.value(z).clone()))
}

/// The gradient-induced nonlinearity.
pub fn grad_suite(opts: &CheckOptions) -> Result<Vec<PropertyResult>> {
    let mut t = Tracker::new("grad", opts.trials);
    let mut rng = rng_for(opts, "check.grad");
    let specs: Vec<DirectSumSpec> = GRAD_SPECS.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    for trial in 0..opts.trials {
        let spec = &specs[trial % specs.len()];
        let (store, p) = random_block(rng.random(), spec)?;
        let x = Mat::row(random_vec(&mut rng, spec.total_dim()));
        let r = Rotation::sample(&mut rng);
        let (v, u, z) = induce(&store, &p, &x)?;
        let (vr, ur, zr) = induce(&store, &p, &spec.rotate_rows(&x, &r)?)?;
        t.record("grad_equivariance", 1e-10, vr.max_abs_diff(&spec.rotate_rows(&v, &r)?));
        t.record("u_invariance", 1e-12, ur.max_abs_diff(&u));
        t.record("z_invariance", 1e-12, zr.max_abs_diff(&z));
        // Finite differences are costly; a slice of the trials suffices.
        if trial % 10 == 0 {
            let z_sum = |q: &[f64]| {
                induce(&store, &p, &Mat::row(q.to_vec()))
                    .map(|(_, _, z)| z.data().iter().sum())
                    .unwrap_or(f64::NAN)
            };
            t.record("grad_finite_difference", 1e-6, finite_diff_check(z_sum, v.data(), x.data(), 1e-3)?);
        }
    }
    Ok(t.rows)
}

/// The synthetic oracle and, optionally, a dataset file.
pub fn data_suite(opts: &CheckOptions, file: Option<&Path>) -> Result<Vec<PropertyResult>> {
    let mut t = Tracker::new("data", opts.trials);
    let mut rng = rng_for(opts, "check.data");
    let params = OracleParams::new(OrbitalBasisSpec::default(), opts.seed, DEFAULT_SCALE)?;
    for _ in 0..opts.trials {
        let n = rng.random_range(2..=8);
        let pos = sample_geometry(&mut rng, n)?;
        let species = (0..n).map(|_| rng.random_range(0..params.basis.species_count())).collect();
        let sys = AtomicSystem::new(pos, species, DEFAULT_CUTOFF)?;
        let r = Rotation::sample(&mut rng);
        let a = oracle_blocks(&params, &sys)?;
        let b = oracle_blocks(&params, &sys.rotated(&r))?;
        let mut worst = if a.len() == b.len() { 0.0f64 } else { f64::INFINITY };
        for (k, blk) in &a {
            let rot = blk.rotated(&r)?;
            let other = b.get(k).map(|x| x.data()).unwrap_or(&[]);
            if other.len() != rot.data().len() {
                worst = f64::INFINITY;
                continue;
            }
            for (x, y) in rot.data().iter().zip(other) {
                worst = worst.max((x - y).abs() / params.scale);
            }
        }
        t.record("oracle_equivariance", 1e-12, worst);
        t.record("oracle_hermiticity", 1e-12, hermiticity_residual(&a).unwrap_or(f64::INFINITY) / params.scale);
    }
    if let Some(path) = file {
        // Reading validates header, checksum and every record.
        let (_, records) = read_dataset(path)?;
        let worst = records
            .iter()
            .map(|r| hermiticity_residual(&r.blocks).unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max);
        let mut row = PropertyResult {
            suite: "data",
            name: "file_hermiticity",
            worst,
            tol: 1e-12 * DEFAULT_SCALE,
            trials: records.len(),
        };
        if worst.is_nan() {
            row.worst = f64::INFINITY;
        }
        t.rows.push(row);
    }
    Ok(t.rows)
}
