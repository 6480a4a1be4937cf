use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::so3::{HamiltonianBlock, Rotation};
use crate::{Error, Result};

/// Smallest allowed interatomic distance (Å).
pub const MIN_SEPARATION: f64 = 1e-6;

/// A finite cluster of atoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomicSystem {
    /// Cartesian positions in Å.
    pub positions: Vec<[f64; 3]>,
    pub species: Vec<usize>,
    /// Interaction cutoff in Å.
    pub cutoff: f64,
}

impl AtomicSystem {
    pub fn new(positions: Vec<[f64; 3]>, species: Vec<usize>, cutoff: f64) -> Result<Self> {
        let s = AtomicSystem {
            positions,
            species,
            cutoff,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n < 2 {
            return Err(Error::param(format!("a system needs at least 2 atoms, got {n}")));
        }
        if self.species.len() != n {
            return Err(Error::param(format!("{} species for {n} atoms", self.species.len())));
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return Err(Error::param(format!("cutoff must be positive, got {}", self.cutoff)));
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::param("non-finite position"));
        }
        for i in 0..n {
            for j in i + 1..n {
                if distance(self.positions[i], self.positions[j]) <= MIN_SEPARATION {
                    return Err(Error::param(format!("atoms {i} and {j} coincide")));
                }
            }
        }
        Ok(())
    }

    /// The same cluster rotated about the origin.
    pub fn rotated(&self, r: &Rotation) -> AtomicSystem {
        AtomicSystem {
            positions: self.positions.iter().map(|&p| r.apply(p)).collect(),
            species: self.species.clone(),
            cutoff: self.cutoff,
        }
    }

    pub fn translated(&self, t: [f64; 3]) -> AtomicSystem {
        AtomicSystem {
            positions: self
                .positions
                .iter()
                .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
                .collect(),
            species: self.species.clone(),
            cutoff: self.cutoff,
        }
    }

    /// Atom `k` of the result is atom `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> AtomicSystem {
        AtomicSystem {
            positions: perm.iter().map(|&k| self.positions[k]).collect(),
            species: perm.iter().map(|&k| self.species[k]).collect(),
            cutoff: self.cutoff,
        }
    }
}

pub(crate) fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// A directed edge `i → j`; self-edges have `i == j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    /// `r_j − r_i` in Å.
    pub vector: [f64; 3],
    pub distance: f64,
    /// Unit vector, `None` on self-edges.
    pub unit: Option<[f64; 3]>,
    /// Index of the edge `j → i`.
    pub reverse: usize,
}

/// Directed neighbour graph of a system, sorted by `(i, j)`.
#[derive(Clone, Debug)]
pub struct Graph {
    pub n_atoms: usize,
    pub edges: Vec<Edge>,
}

impl Graph {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Edge index of `(i, j)`.
    pub fn find(&self, i: usize, j: usize) -> Option<usize> {
        self.edges.binary_search_by(|e| (e.i, e.j).cmp(&(i, j))).ok()
    }
}

/// All ordered pairs with `d ≤ cutoff` plus one self-edge per atom.
///
/// Neighbours are found with a cell list, so the cost is linear in the atom
/// count at bounded density.
pub fn build_graph(system: &AtomicSystem) -> Result<Graph> {
    system.validate()?;
    let rc = system.cutoff;
    let cell = |p: &[f64; 3]| {
        (
            (p[0] / rc).floor() as i64,
            (p[1] / rc).floor() as i64,
            (p[2] / rc).floor() as i64,
        )
    };
    let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (k, p) in system.positions.iter().enumerate() {
        cells.entry(cell(p)).or_default().push(k);
    }
    let mut pairs = Vec::new();
    for (i, p) in system.positions.iter().enumerate() {
        let (cx, cy, cz) = cell(p);
        let mut nb = vec![i];
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        nb.extend(list.iter().copied().filter(|&j| {
                            j != i && distance(*p, system.positions[j]) <= rc
                        }));
                    }
                }
            }
        }
        nb.sort_unstable();
        pairs.extend(nb.into_iter().map(|j| (i, j)));
    }
    let index: HashMap<(usize, usize), usize> = pairs.iter().enumerate().map(|(k, &p)| (p, k)).collect();
    let edges = pairs
        .iter()
        .map(|&(i, j)| {
            let (a, b) = (system.positions[i], system.positions[j]);
            let vector = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let distance = distance(a, b);
            let unit = (i != j).then(|| [vector[0] / distance, vector[1] / distance, vector[2] / distance]);
            Edge {
                i,
                j,
                vector,
                distance,
                unit,
                reverse: index[&(j, i)],
            }
        })
        .collect();
    Ok(Graph {
        n_atoms: system.len(),
        edges,
    })
}

/// Address of one block: atoms `(i, j)` and shells `(p, q)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockKey {
    pub i: usize,
    pub j: usize,
    pub p: usize,
    pub q: usize,
}

/// Blocks for every in-range atom pair, keyed by `(i, j, p, q)`.
pub type PairBlockSet = BTreeMap<BlockKey, HamiltonianBlock>;

/// Largest violation of `H(j,i)(q,p) = H(i,j)(p,q)ᵀ`, or `None` if a partner is missing.
pub fn hermiticity_residual(blocks: &PairBlockSet) -> Option<f64> {
    let mut worst = 0.0f64;
    for (k, b) in blocks {
        let partner = blocks.get(&BlockKey {
            i: k.j,
            j: k.i,
            p: k.q,
            q: k.p,
        })?;
        let t = partner.transpose();
        for (x, y) in b.data().iter().zip(t.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    Some(worst)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn pair(d: f64, rc: f64) -> AtomicSystem {
        AtomicSystem::new(vec![[0.0; 3], [d, 0.0, 0.0]], vec![0, 1], rc).unwrap()
    }

    #[test]
    fn beyond_cutoff_only_self_edges() {
        let g = build_graph(&pair(2.0 + 1e-9, 2.0)).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.edges.iter().all(|e| e.i == e.j && e.unit.is_none()));
    }

    #[test]
    fn within_cutoff_four_edges() {
        let g = build_graph(&pair(1.5, 2.0)).unwrap();
        assert_eq!(g.len(), 4);
        let e = &g.edges[g.find(0, 1).unwrap()];
        assert_eq!(e.unit, Some([1.0, 0.0, 0.0]));
        assert_eq!(g.edges[e.reverse].i, 1);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.random_range(2..40);
            let pos: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)])
                .collect();
            let sys = AtomicSystem::new(pos.clone(), vec![0; n], 2.2).unwrap();
            let g = build_graph(&sys).unwrap();
            let mut brute = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if i == j || distance(pos[i], pos[j]) <= 2.2 {
                        brute.push((i, j));
                    }
                }
            }
            let got: Vec<_> = g.edges.iter().map(|e| (e.i, e.j)).collect();
            assert_eq!(got, brute);
        }
    }

    #[test]
    fn invalid_systems() {
        assert!(AtomicSystem::new(vec![[0.0; 3]], vec![0], 1.0).is_err());
        assert!(AtomicSystem::new(vec![[0.0; 3], [0.0; 3]], vec![0, 0], 1.0).is_err());
        assert!(AtomicSystem::new(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![0], 1.0).is_err());
    }
}
