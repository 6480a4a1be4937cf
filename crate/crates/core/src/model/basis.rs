use serde::{Deserialize, Serialize};

use crate::so3::L_MAX;
use crate::{Error, Result};

/// Orbital shells per species, e.g. species 0 → `[0, 1]` (one s and one p shell).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<usize>>", into = "Vec<Vec<usize>>")]
pub struct OrbitalBasisSpec {
    species: Vec<Vec<usize>>,
}

/// One `(p, q)` block of a species pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockType {
    pub p: usize,
    pub q: usize,
    pub lp: usize,
    pub lq: usize,
}

impl OrbitalBasisSpec {
    pub fn new(species: Vec<Vec<usize>>) -> Result<Self> {
        if species.is_empty() {
            return Err(Error::param("basis needs at least one species"));
        }
        for (s, shells) in species.iter().enumerate() {
            if shells.is_empty() {
                return Err(Error::param(format!("species {s} has no orbitals")));
            }
            if let Some(l) = shells.iter().find(|&&l| 2 * l > L_MAX) {
                return Err(Error::Capability(format!(
                    "species {s}: shell degree {l} needs products beyond l_max = {L_MAX}"
                )));
            }
        }
        Ok(OrbitalBasisSpec { species })
    }

    pub fn species_count(&self) -> usize {
        self.species.len()
    }

    pub fn shells(&self, s: usize) -> &[usize] {
        &self.species[s]
    }

    /// Number of orbitals of species `s`.
    pub fn n_orb(&self, s: usize) -> usize {
        self.species[s].iter().map(|l| 2 * l + 1).sum()
    }

    /// First orbital index of shell `p` of species `s`.
    pub fn orb_offset(&self, s: usize, p: usize) -> usize {
        self.species[s][..p].iter().map(|l| 2 * l + 1).sum()
    }

    /// Largest orbital count over species; edge rows are padded to its square.
    pub fn max_orb(&self) -> usize {
        (0..self.species.len()).map(|s| self.n_orb(s)).max().unwrap_or(0)
    }

    pub fn max_shells(&self) -> usize {
        self.species.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn max_shell_degree(&self) -> usize {
        self.species.iter().flatten().copied().max().unwrap_or(0)
    }

    /// Blocks of the pair `(si, sj)` in `(p, q)` order.
    pub fn block_types(&self, si: usize, sj: usize) -> Vec<BlockType> {
        let mut out = Vec::new();
        for (p, &lp) in self.species[si].iter().enumerate() {
            for (q, &lq) in self.species[sj].iter().enumerate() {
                out.push(BlockType { p, q, lp, lq });
            }
        }
        out
    }

    /// Number of distinct `(si, sj, p, q)` block types.
    pub fn total_block_types(&self) -> usize {
        let n: Vec<usize> = self.species.iter().map(Vec::len).collect();
        n.iter().map(|a| n.iter().map(|b| a * b).sum::<usize>()).sum()
    }

    /// Distinct `(lp, lq)` degree pairs that occur.
    pub fn degree_pairs(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = (0..self.species.len())
            .flat_map(|a| (0..self.species.len()).map(move |b| (a, b)))
            .flat_map(|(a, b)| self.block_types(a, b))
            .map(|t| (t.lp, t.lq))
            .collect();
        v.sort();
        v.dedup();
        v
    }
}

impl Default for OrbitalBasisSpec {
    /// Two species with shells `[0, 1]` and `[0, 0, 1]`.
    fn default() -> Self {
        OrbitalBasisSpec {
            species: vec![vec![0, 1], vec![0, 0, 1]],
        }
    }
}

impl TryFrom<Vec<Vec<usize>>> for OrbitalBasisSpec {
    type Error = Error;

    fn try_from(v: Vec<Vec<usize>>) -> Result<Self> {
        OrbitalBasisSpec::new(v)
    }
}

impl From<OrbitalBasisSpec> for Vec<Vec<usize>> {
    fn from(b: OrbitalBasisSpec) -> Self {
        b.species
    }
}
