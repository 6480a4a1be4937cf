//! Synthetic datasets: random clusters labelled by the oracle, and their
//! line-oriented file format.

mod io;
mod oracle;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::{read_dataset, write_dataset, DatasetHeader, DATASET_FORMAT, DATASET_VERSION};
pub use oracle::{oracle_block, oracle_blocks, OracleParams, Radial, DEFAULT_SCALE};

use crate::model::{build_graph, hermiticity_residual, AtomicSystem, BlockKey, OrbitalBasisSpec, PairBlockSet};
use crate::params::derive_seed;
use crate::so3::{trace_label, Rotation, TraceLabel};
use crate::{Error, Result};

/// Lattice spacing of generated clusters (Å).
pub const LATTICE_SPACING: f64 = 1.4;
/// Per-coordinate jitter amplitude (Å).
pub const JITTER: f64 = 0.25;
/// Smallest accepted interatomic distance in generated clusters (Å).
pub const MIN_DISTANCE: f64 = 0.8;
/// Default cutoff (Å): first and second lattice shells are neighbours.
pub const DEFAULT_CUTOFF: f64 = 2.2;
const MAX_TRIES: usize = 100;

/// Which partition a record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Inclusive atom-count range, written `min:max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SizeRange {
    pub min: usize,
    pub max: usize,
}

impl SizeRange {
    pub fn new(min: usize, max: usize) -> Result<Self> {
        if min < 2 {
            return Err(Error::param(format!("systems need at least 2 atoms, got a minimum of {min}")));
        }
        if max < min {
            return Err(Error::param(format!("empty size range {min}:{max}")));
        }
        Ok(SizeRange { min, max })
    }

    pub fn contains(&self, n: usize) -> bool {
        (self.min..=self.max).contains(&n)
    }

    pub fn overlaps(&self, other: &SizeRange) -> bool {
        self.min <= other.max && other.min <= self.max
    }
}

impl FromStr for SizeRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s.split_once(':').unwrap_or((s, s));
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| Error::param(format!("bad size range `{s}`: {e}")))
        };
        SizeRange::new(parse(a)?, parse(b)?)
    }
}

impl TryFrom<String> for SizeRange {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SizeRange> for String {
    fn from(r: SizeRange) -> Self {
        r.to_string()
    }
}

impl fmt::Display for SizeRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.min, self.max)
    }
}

/// One labelled system.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub split: Split,
    pub system: AtomicSystem,
    pub blocks: PairBlockSet,
    pub traces: BTreeMap<BlockKey, TraceLabel>,
}

impl DatasetRecord {
    /// Label a system with the oracle.
    pub fn label(params: &OracleParams, system: AtomicSystem, split: Split) -> Result<Self> {
        let blocks = oracle_blocks(params, &system)?;
        let traces = blocks.iter().map(|(k, b)| (*k, trace_label(b))).collect();
        Ok(DatasetRecord {
            split,
            system,
            blocks,
            traces,
        })
    }

    /// Trace values as plain numbers.
    pub fn trace_values(&self) -> BTreeMap<BlockKey, f64> {
        self.traces.iter().map(|(k, t)| (*k, t.0)).collect()
    }

    /// Check the record against the basis: geometry, block coverage and
    /// shapes, symmetry within 1e-12, and traces recomputed to the last bit.
    pub fn validate(&self, basis: &OrbitalBasisSpec) -> Result<()> {
        let sys = &self.system;
        sys.validate()?;
        let ns = basis.species_count();
        if let Some(s) = sys.species.iter().find(|&&s| s >= ns) {
            return Err(Error::param(format!("species {s} not in the basis")));
        }
        let graph = build_graph(sys)?;
        let mut expected = 0;
        for e in &graph.edges {
            for t in basis.block_types(sys.species[e.i], sys.species[e.j]) {
                expected += 1;
                let key = BlockKey {
                    i: e.i,
                    j: e.j,
                    p: t.p,
                    q: t.q,
                };
                let b = self
                    .blocks
                    .get(&key)
                    .ok_or_else(|| Error::param(format!("missing block {key:?}")))?;
                if (b.lp, b.lq) != (t.lp, t.lq) {
                    return Err(Error::param(format!("block {key:?} has degrees {}⊗{}", b.lp, b.lq)));
                }
            }
        }
        if expected != self.blocks.len() {
            return Err(Error::param(format!(
                "{} blocks but {expected} in-range block slots",
                self.blocks.len()
            )));
        }
        match hermiticity_residual(&self.blocks) {
            Some(r) if r <= 1e-12 => {}
            Some(r) => return Err(Error::param(format!("blocks violate symmetry by {r:e}"))),
            None => return Err(Error::param("a block has no transpose partner")),
        }
        if self.traces.len() != self.blocks.len() {
            return Err(Error::param("trace keys do not match block keys"));
        }
        for (k, b) in &self.blocks {
            let t = self
                .traces
                .get(k)
                .ok_or_else(|| Error::param(format!("missing trace {k:?}")))?;
            if t.0.to_bits() != trace_label(b).0.to_bits() {
                return Err(Error::param(format!("trace {k:?} differs from its block")));
            }
        }
        Ok(())
    }
}

/// Random cluster: a connected set of simple-cubic lattice sites grown one
/// face-neighbour at a time, jittered, randomly rotated and centred.
pub fn sample_geometry<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<Vec<[f64; 3]>> {
    if n < 2 {
        return Err(Error::param(format!("systems need at least 2 atoms, got {n}")));
    }
    for _ in 0..MAX_TRIES {
        let mut sites: Vec<[i32; 3]> = vec![[0, 0, 0]];
        while sites.len() < n {
            let mut frontier: Vec<[i32; 3]> = Vec::new();
            for s in &sites {
                for (axis, step) in [(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)] {
                    let mut t = *s;
                    t[axis] += step;
                    if !sites.contains(&t) && !frontier.contains(&t) {
                        frontier.push(t);
                    }
                }
            }
            sites.push(frontier[rng.random_range(0..frontier.len())]);
        }
        let r = Rotation::sample(rng);
        let mut pos: Vec<[f64; 3]> = sites
            .iter()
            .map(|s| {
                let p = [0, 1, 2].map(|a| s[a] as f64 * LATTICE_SPACING + rng.random_range(-JITTER..=JITTER));
                r.apply(p)
            })
            .collect();
        let mut centre = [0.0; 3];
        for p in &pos {
            for a in 0..3 {
                centre[a] += p[a] / n as f64;
            }
        }
        for p in &mut pos {
            for a in 0..3 {
                p[a] -= centre[a];
            }
        }
        let ok = (0..n).all(|i| (i + 1..n).all(|j| crate::model::distance(pos[i], pos[j]) >= MIN_DISTANCE));
        if ok {
            return Ok(pos);
        }
    }
    Err(Error::Generation(format!(
        "could not place {n} atoms {MIN_DISTANCE} Å apart after {MAX_TRIES} attempts"
    )))
}

/// Generate `count` labelled systems with sizes drawn uniformly from `sizes`.
///
/// Record `k` uses its own generator seeded from `seed`, the split and `k`,
/// so the output does not depend on the thread count.
pub fn generate_dataset(
    params: &OracleParams,
    count: usize,
    sizes: SizeRange,
    cutoff: f64,
    seed: u64,
    split: Split,
) -> Result<Vec<DatasetRecord>> {
    let ns = params.basis.species_count();
    (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("{split}.{k}")));
            let n = rng.random_range(sizes.min..=sizes.max);
            let positions = sample_geometry(&mut rng, n)?;
            let species = (0..n).map(|_| rng.random_range(0..ns)).collect();
            let system = AtomicSystem::new(positions, species, cutoff)?;
            DatasetRecord::label(params, system, split)
        })
        .collect()
}

/// Counts and size ranges of the three splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: (usize, SizeRange),
    pub val: (usize, SizeRange),
    pub test: (usize, SizeRange),
}

impl SplitPlan {
    /// All splits share one size range.
    pub fn iid(train: usize, val: usize, test: usize, sizes: SizeRange) -> Self {
        SplitPlan {
            train: (train, sizes),
            val: (val, sizes),
            test: (test, sizes),
        }
    }

    /// Disjoint size ranges per split; overlapping ranges are rejected.
    pub fn ood(train: (usize, SizeRange), val: (usize, SizeRange), test: (usize, SizeRange)) -> Result<Self> {
        let plan = SplitPlan { train, val, test };
        let r = [plan.train.1, plan.val.1, plan.test.1];
        for a in 0..3 {
            for b in a + 1..3 {
                if r[a].overlaps(&r[b]) {
                    return Err(Error::param(format!("size ranges {} and {} overlap", r[a], r[b])));
                }
            }
        }
        Ok(plan)
    }
}

/// Generate all three splits, train first.
pub fn generate_splits(params: &OracleParams, plan: &SplitPlan, cutoff: f64, seed: u64) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (split, (count, sizes)) in [(Split::Train, plan.train), (Split::Val, plan.val), (Split::Test, plan.test)] {
        out.extend(generate_dataset(params, count, sizes, cutoff, seed, split)?);
    }
    Ok(out)
}

/// Entry variance (meV²) of each `(s_i, s_j, p, q)` block type over a dataset.
pub fn block_type_variance(records: &[DatasetRecord]) -> BTreeMap<(usize, usize, usize, usize), f64> {
    let mut acc: BTreeMap<(usize, usize, usize, usize), (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        for (k, b) in &r.blocks {
            let e = acc
                .entry((r.system.species[k.i], r.system.species[k.j], k.p, k.q))
                .or_insert((0.0, 0.0, 0));
            for &x in b.data() {
                e.0 += x;
                e.1 += x * x;
                e.2 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|(k, (s, s2, n))| {
            let mean = s / n as f64;
            (k, s2 / n as f64 - mean * mean)
        })
        .collect()
}
