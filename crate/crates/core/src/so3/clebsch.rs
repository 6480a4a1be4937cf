//! Real Clebsch–Gordan coefficients and the block (de)composition built on them.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use once_cell::sync::Lazy;

use super::wigner::{real_basis_change, wigner_d};
use super::{factorial, HamiltonianBlock, Rotation, L_MAX};
use crate::error::{Error, Result};

const REALNESS_TOL: f64 = 1e-12;

/// Coefficients `C[m, mp, mq]` coupling `lp ⊗ lq` into degree `l`.
///
/// Rows are orthonormal and satisfy `D^l·C = C·(D^{lp} ⊗ D^{lq})` with the
/// product index flattened row-major as `mp·(2lq+1) + mq`.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub l: usize,
    pub lp: usize,
    pub lq: usize,
    coeffs: Vec<f64>,
    nonzeros: Vec<(usize, usize, usize, f64)>,
}

impl Coupling {
    fn new(l: usize, lp: usize, lq: usize, coeffs: Vec<f64>) -> Self {
        let (np, nq) = (2 * lp + 1, 2 * lq + 1);
        let mut nonzeros = Vec::new();
        for m in 0..2 * l + 1 {
            for a in 0..np {
                for b in 0..nq {
                    let c = coeffs[m * np * nq + a * nq + b];
                    if c.abs() > 1e-14 {
                        nonzeros.push((m, a, b, c));
                    }
                }
            }
        }
        Coupling {
            l,
            lp,
            lq,
            coeffs,
            nonzeros,
        }
    }

    #[inline]
    pub fn get(&self, m: usize, mp: usize, mq: usize) -> f64 {
        let (np, nq) = (2 * self.lp + 1, 2 * self.lq + 1);
        self.coeffs[m * np * nq + mp * nq + mq]
    }

    /// `(m, mp, mq, value)` for every nonzero coefficient.
    pub fn nonzeros(&self) -> &[(usize, usize, usize, f64)] {
        &self.nonzeros
    }

    /// Row-major `(2l+1) × (2lp+1)(2lq+1)` matrix.
    pub fn as_matrix(&self) -> DMatrix<f64> {
        let cols = (2 * self.lp + 1) * (2 * self.lq + 1);
        DMatrix::from_row_slice(2 * self.l + 1, cols, &self.coeffs)
    }
}

/// All couplings of `lp ⊗ lq`, one per output degree in `|lp-lq| ..= lp+lq`.
#[derive(Debug, Clone)]
pub struct CgTable {
    pub lp: usize,
    pub lq: usize,
    pub couplings: Vec<Arc<Coupling>>,
}

impl CgTable {
    pub fn degrees(&self) -> std::ops::RangeInclusive<usize> {
        self.lp.abs_diff(self.lq)..=self.lp + self.lq
    }
}

struct Tables {
    couplings: HashMap<(usize, usize, usize), Arc<Coupling>>,
}

static TABLES: Lazy<Tables> = Lazy::new(|| {
    let mut couplings = HashMap::new();
    for lp in 0..=L_MAX {
        for lq in 0..=L_MAX {
            for l in lp.abs_diff(lq)..=(lp + lq).min(L_MAX) {
                let c = analytic_real_cg(l, lp, lq).unwrap_or_else(|| nullspace_real_cg(l, lp, lq));
                couplings.insert((l, lp, lq), Arc::new(Coupling::new(l, lp, lq, c)));
            }
        }
    }
    Tables { couplings }
});

/// The coupling for a single triple; all degrees must be within `l_max`.
pub fn coupling(l: usize, lp: usize, lq: usize) -> Result<Arc<Coupling>> {
    if l.max(lp).max(lq) > L_MAX {
        return Err(Error::Capability(format!(
            "coupling ({lp} ⊗ {lq} → {l}) exceeds l_max = {L_MAX}"
        )));
    }
    TABLES
        .couplings
        .get(&(l, lp, lq))
        .cloned()
        .ok_or_else(|| Error::param(format!("degrees ({lp} ⊗ {lq} → {l}) violate the triangle rule")))
}

/// The complete decomposition table for `lp ⊗ lq`.
pub fn cg_table(lp: usize, lq: usize) -> Result<CgTable> {
    if lp + lq > L_MAX {
        return Err(Error::Capability(format!(
            "block {lp} ⊗ {lq} needs degrees up to {} > l_max = {L_MAX}",
            lp + lq
        )));
    }
    let couplings = (lp.abs_diff(lq)..=lp + lq)
        .map(|l| coupling(l, lp, lq))
        .collect::<Result<Vec<_>>>()?;
    Ok(CgTable { lp, lq, couplings })
}

/// Splits a block into its direct-sum components `h^l`.
pub fn cg_decompose(block: &HamiltonianBlock) -> Result<BTreeMap<usize, Vec<f64>>> {
    let table = cg_table(block.lp, block.lq)?;
    let data = block.data();
    Ok(table
        .couplings
        .iter()
        .map(|c| {
            let mut h = vec![0.0; 2 * c.l + 1];
            for &(m, a, b, v) in c.nonzeros() {
                h[m] += v * data[a * (2 * c.lq + 1) + b];
            }
            (c.l, h)
        })
        .collect())
}

/// Inverse of [`cg_decompose`].
pub fn cg_recompose(components: &BTreeMap<usize, Vec<f64>>, lp: usize, lq: usize) -> Result<HamiltonianBlock> {
    let table = cg_table(lp, lq)?;
    let expected: Vec<usize> = table.degrees().collect();
    let present: Vec<usize> = components.keys().copied().collect();
    if present != expected {
        return Err(Error::param(format!(
            "components for degrees {present:?} do not match required {expected:?}"
        )));
    }
    let nq = 2 * lq + 1;
    let mut data = vec![0.0; (2 * lp + 1) * nq];
    for c in &table.couplings {
        let h = &components[&c.l];
        if h.len() != 2 * c.l + 1 {
            return Err(Error::param(format!(
                "component l={} has length {}, expected {}",
                c.l,
                h.len(),
                2 * c.l + 1
            )));
        }
        for &(m, a, b, v) in c.nonzeros() {
            data[a * nq + b] += v * h[m];
        }
    }
    HamiltonianBlock::new(lp, lq, data)
}

/// Degree-0 projection of `f1 ⊗ f2`: `⟨f1, f2⟩ / √(2l+1)`.
pub fn degree0_invariant(f1: &[f64], f2: &[f64]) -> Result<f64> {
    if f1.len() != f2.len() || f1.len() % 2 == 0 {
        return Err(Error::param(format!(
            "degree mismatch: components of length {} and {}",
            f1.len(),
            f2.len()
        )));
    }
    let dot: f64 = f1.iter().zip(f2).map(|(a, b)| a * b).sum();
    Ok(dot / (f1.len() as f64).sqrt())
}

/// Complex Clebsch–Gordan `⟨j1 m1 j2 m2 | J M⟩` (Racah formula).
fn complex_cg(j1: i64, m1: i64, j2: i64, m2: i64, j: i64, m: i64) -> f64 {
    if m != m1 + m2 || m1.abs() > j1 || m2.abs() > j2 || m.abs() > j {
        return 0.0;
    }
    let pre = ((2 * j + 1) as f64 * factorial(j + j1 - j2) * factorial(j - j1 + j2) * factorial(j1 + j2 - j)
        / factorial(j1 + j2 + j + 1))
    .sqrt();
    let pre2 = (factorial(j + m)
        * factorial(j - m)
        * factorial(j1 - m1)
        * factorial(j1 + m1)
        * factorial(j2 - m2)
        * factorial(j2 + m2))
    .sqrt();
    let mut sum = 0.0;
    for k in 0..=(j1 + j2 - j) {
        let terms = [
            j1 + j2 - j - k,
            j1 - m1 - k,
            j2 + m2 - k,
            j - j2 + m1 + k,
            j - j1 - m2 + k,
        ];
        if terms.iter().any(|&t| t < 0) {
            continue;
        }
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let denom: f64 = factorial(k) * terms.iter().map(|&t| factorial(t)).product::<f64>();
        sum += sign / denom;
    }
    pre * pre2 * sum
}

/// `U^l · CG · (U^{lp} ⊗ U^{lq})†`, rephased to be real. `None` if the phase
/// convention fails to produce a real array.
fn analytic_real_cg(l: usize, lp: usize, lq: usize) -> Option<Vec<f64>> {
    let (n, np, nq) = (2 * l + 1, 2 * lp + 1, 2 * lq + 1);
    let (li, lpi, lqi) = (l as i64, lp as i64, lq as i64);
    let u = real_basis_change(l);
    let up = real_basis_change(lp);
    let uq = real_basis_change(lq);
    let mut out = vec![Complex64::new(0.0, 0.0); n * np * nq];
    for m in 0..n {
        for a in 0..np {
            for b in 0..nq {
                let mut acc = Complex64::new(0.0, 0.0);
                for big_m in 0..n {
                    if u[(m, big_m)].norm() == 0.0 {
                        continue;
                    }
                    for ma in 0..np {
                        if up[(a, ma)].norm() == 0.0 {
                            continue;
                        }
                        let mb_signed = (big_m as i64 - li) - (ma as i64 - lpi);
                        if mb_signed.abs() > lqi {
                            continue;
                        }
                        let mb = (mb_signed + lqi) as usize;
                        if uq[(b, mb)].norm() == 0.0 {
                            continue;
                        }
                        let cg = complex_cg(lpi, ma as i64 - lpi, lqi, mb_signed, li, big_m as i64 - li);
                        acc += u[(m, big_m)] * cg * up[(a, ma)].conj() * uq[(b, mb)].conj();
                    }
                }
                out[m * np * nq + a * nq + b] = acc;
            }
        }
    }
    let pivot = out.iter().copied().max_by(|x, y| x.norm().total_cmp(&y.norm()))?;
    if pivot.norm() < 1e-12 {
        return None;
    }
    let phase = pivot.conj() / pivot.norm();
    let mut real = Vec::with_capacity(out.len());
    for z in out {
        let w = z * phase;
        if w.im.abs() > REALNESS_TOL {
            return None;
        }
        real.push(w.re);
    }
    Some(real)
}

/// Solves `D^l·C = C·(D^{lp} ⊗ D^{lq})` for two generic rotations and takes
/// the null vector, normalised to orthonormal rows.
pub(crate) fn nullspace_real_cg(l: usize, lp: usize, lq: usize) -> Vec<f64> {
    let (n, np, nq) = (2 * l + 1, 2 * lp + 1, 2 * lq + 1);
    let cols = np * nq;
    let dim = n * cols;
    let rotations = [
        Rotation::from_euler_zyz(0.31, 1.17, -0.53).expect("finite angles"),
        Rotation::from_euler_zyz(-1.9, 0.41, 2.6).expect("finite angles"),
    ];
    let mut system = DMatrix::<f64>::zeros(2 * dim, dim);
    for (block, r) in rotations.iter().enumerate() {
        let d = wigner_d(l, r).expect("degree within l_max").matrix;
        let dp = wigner_d(lp, r).expect("degree within l_max").matrix;
        let dq = wigner_d(lq, r).expect("degree within l_max").matrix;
        let k = dp.kronecker(&dq);
        let off = block * dim;
        for i in 0..n {
            for j in 0..cols {
                let row = off + i * cols + j;
                for kk in 0..n {
                    system[(row, kk * cols + j)] += d[(i, kk)];
                }
                for kk in 0..cols {
                    system[(row, i * cols + kk)] -= k[(kk, j)];
                }
            }
        }
    }
    let gram = system.transpose() * &system;
    let eig = gram.symmetric_eigen();
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty system");
    let v = eig.eigenvectors.column(idx);
    // C Cᵀ = s·I by Schur; rescale so s = 1
    let norm2: f64 = v.iter().map(|x| x * x).sum();
    let scale = (n as f64 / norm2).sqrt();
    let pivot = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
    let sign = pivot.signum();
    v.iter().map(|x| x * scale * sign).collect()
}
