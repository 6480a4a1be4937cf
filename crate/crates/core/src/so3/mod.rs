//! Parameter-free group-theoretic kernels: rotations, real spherical
//! harmonics, real Wigner-D matrices, Clebsch–Gordan (de)composition and the
//! rotation-invariant trace label of a Hamiltonian block.

mod clebsch;
mod harmonics;
mod rotation;
mod wigner;

pub use clebsch::{cg_decompose, cg_recompose, cg_table, coupling, degree0_invariant, CgTable, Coupling};
pub use harmonics::{real_sph_harm, sph_harm_upto};
pub(crate) use harmonics::sph_harm_unchecked;
pub use rotation::Rotation;
pub use wigner::{wigner_d, WignerD};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest degree the precomputed tables cover.
pub const L_MAX: usize = 4;

pub(crate) fn factorial(n: i64) -> f64 {
    debug_assert!(n >= 0);
    (1..=n).map(|k| k as f64).product()
}

/// The `(2lp+1) × (2lq+1)` real sub-matrix coupling a degree-`lp` orbital
/// with a degree-`lq` orbital. Entries are in meV, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianBlock {
    pub lp: usize,
    pub lq: usize,
    data: Vec<f64>,
}

impl HamiltonianBlock {
    pub fn new(lp: usize, lq: usize, data: Vec<f64>) -> Result<Self> {
        let expect = (2 * lp + 1) * (2 * lq + 1);
        if data.len() != expect {
            return Err(Error::param(format!(
                "block {lp}⊗{lq} needs {expect} entries, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::param(format!("block entry {i} is not finite")));
        }
        Ok(HamiltonianBlock { lp, lq, data })
    }

    pub fn zeros(lp: usize, lq: usize) -> Self {
        HamiltonianBlock {
            lp,
            lq,
            data: vec![0.0; (2 * lp + 1) * (2 * lq + 1)],
        }
    }

    pub fn rows(&self) -> usize {
        2 * self.lp + 1
    }

    pub fn cols(&self) -> usize {
        2 * self.lq + 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.cols() + b]
    }

    pub fn transpose(&self) -> HamiltonianBlock {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        for a in 0..r {
            for b in 0..c {
                data[b * r + a] = self.data[a * c + b];
            }
        }
        HamiltonianBlock {
            lp: self.lq,
            lq: self.lp,
            data,
        }
    }

    pub fn scaled(&self, s: f64) -> HamiltonianBlock {
        HamiltonianBlock {
            lp: self.lp,
            lq: self.lq,
            data: self.data.iter().map(|x| s * x).collect(),
        }
    }

    /// `D^{lp}(R) · H · D^{lq}(R)ᵀ`
    pub fn rotated(&self, r: &Rotation) -> Result<HamiltonianBlock> {
        let dp = wigner_d(self.lp, r)?.matrix;
        let dq = wigner_d(self.lq, r)?.matrix;
        let h = nalgebra::DMatrix::from_row_slice(self.rows(), self.cols(), &self.data);
        let out = dp * h * dq.transpose();
        let mut data = Vec::with_capacity(self.data.len());
        for a in 0..self.rows() {
            for b in 0..self.cols() {
                data.push(out[(a, b)]);
            }
        }
        Ok(HamiltonianBlock {
            lp: self.lp,
            lq: self.lq,
            data,
        })
    }
}

/// `tr(H·Hᵀ)` of a block, in meV².
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct TraceLabel(pub f64);

/// Sum of squared entries, which equals `tr(H·H†)` for real blocks.
pub fn trace_label(block: &HamiltonianBlock) -> TraceLabel {
    TraceLabel(block.data.iter().map(|x| x * x).sum())
}
