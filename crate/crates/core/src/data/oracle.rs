//! An exactly equivariant synthetic Hamiltonian.
//!
//! Off-site block `(i, j, p, q)` has direct-sum components
//! `h^l = φ_l(d)·Y^l(r̂_ij)` with `φ_l(d) = a·sin(b·d)·e^{−d/2} + c/(1+d²)`.
//! On-site blocks carry a constant degree-0 part plus the same construction,
//! with its own coefficients, summed over neighbours. Every block is finally
//! averaged with the transpose of its partner so the assembled matrix is
//! symmetric.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{build_graph, AtomicSystem, BlockKey, Graph, OrbitalBasisSpec, PairBlockSet};
use crate::params::derive_seed;
use crate::so3::{cg_recompose, sph_harm_unchecked, HamiltonianBlock};
use crate::{Error, Result};

/// Coefficients `(a, b, c)` of one radial function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Radial {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Radial {
    pub fn eval(&self, d: f64) -> f64 {
        self.a * (self.b * d).sin() * (-0.5 * d).exp() + self.c / (1.0 + d * d)
    }
}

/// Key `(s_i, s_j, p, q, l)` of a radial function.
type RadialKey = (usize, usize, usize, usize, usize);

/// All oracle coefficients; deterministic in `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleParams {
    pub basis: OrbitalBasisSpec,
    pub seed: u64,
    /// Energy unit of the blocks in meV.
    pub scale: f64,
    off: BTreeMap<RadialKey, Radial>,
    /// On-site family keyed `(s_i, s_neighbour, p, q, l)` with both shells on `s_i`.
    env: BTreeMap<RadialKey, Radial>,
    /// Degree-0 on-site constant for `(s, p, q)` with `l_p = l_q`.
    constant: BTreeMap<(usize, usize, usize), f64>,
}

/// Default block energy unit (meV).
pub const DEFAULT_SCALE: f64 = 100.0;

impl OracleParams {
    pub fn new(basis: OrbitalBasisSpec, seed: u64, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::param(format!("oracle scale must be positive, got {scale}")));
        }
        let mut off = BTreeMap::new();
        let mut env = BTreeMap::new();
        let mut constant = BTreeMap::new();
        let ns = basis.species_count();
        for si in 0..ns {
            for sj in 0..ns {
                for t in basis.block_types(si, sj) {
                    for l in t.lp.abs_diff(t.lq)..=t.lp + t.lq {
                        let tag = format!("{si}.{sj}.{}.{}.{l}", t.p, t.q);
                        off.insert((si, sj, t.p, t.q, l), draw(seed, &format!("off.{tag}"), 1.0));
                    }
                    if si == sj && t.lp == t.lq {
                        let label = format!("const.{si}.{}.{}", t.p, t.q);
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &label));
                        constant.insert((si, t.p, t.q), rng.random_range(-2.0..2.0));
                    }
                }
                // On-site shells of `si` seen from a neighbour of species `sj`.
                for t in basis.block_types(si, si) {
                    for l in t.lp.abs_diff(t.lq)..=t.lp + t.lq {
                        let tag = format!("{si}.{sj}.{}.{}.{l}", t.p, t.q);
                        env.insert((si, sj, t.p, t.q, l), draw(seed, &format!("env.{tag}"), 0.5));
                    }
                }
            }
        }
        Ok(OracleParams {
            basis,
            seed,
            scale,
            off,
            env,
            constant,
        })
    }

    pub fn radial(&self, key: RadialKey) -> Option<&Radial> {
        self.off.get(&key)
    }
}

fn draw(seed: u64, label: &str, amp: f64) -> Radial {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label));
    Radial {
        a: amp * rng.random_range(-1.0..1.0),
        b: rng.random_range(1.0..3.0),
        c: amp * rng.random_range(-1.0..1.0),
    }
}

fn add_into(acc: &mut [f64], b: &HamiltonianBlock, s: f64) {
    for (x, y) in acc.iter_mut().zip(b.data()) {
        *x += s * y;
    }
}

/// `Σ_l φ_l(d)·recompose(Y^l(u))` for one family of radial functions.
fn directional(
    family: &BTreeMap<RadialKey, Radial>,
    (si, sj, p, q): (usize, usize, usize, usize),
    (lp, lq): (usize, usize),
    d: f64,
    unit: [f64; 3],
) -> Result<HamiltonianBlock> {
    let mut comps = BTreeMap::new();
    for l in lp.abs_diff(lq)..=lp + lq {
        let phi = family[&(si, sj, p, q, l)].eval(d);
        comps.insert(l, sph_harm_unchecked(l, unit).into_iter().map(|y| phi * y).collect());
    }
    cg_recompose(&comps, lp, lq)
}

/// The block before symmetrisation, in units of `scale`.
fn raw_block(params: &OracleParams, system: &AtomicSystem, graph: &Graph, i: usize, j: usize, p: usize, q: usize) -> Result<Vec<f64>> {
    let basis = &params.basis;
    let (si, sj) = (system.species[i], system.species[j]);
    let (lp, lq) = (basis.shells(si)[p], basis.shells(sj)[q]);
    let mut acc = vec![0.0; (2 * lp + 1) * (2 * lq + 1)];
    if i != j {
        let e = &graph.edges[graph.find(i, j).expect("caller checks the pair")];
        let b = directional(&params.off, (si, sj, p, q), (lp, lq), e.distance, e.unit.expect("off-site edge"))?;
        add_into(&mut acc, &b, 1.0);
        return Ok(acc);
    }
    if let Some(&c) = params.constant.get(&(si, p, q)) {
        // Degree-0 component: identity over the shell's m values.
        for m in 0..2 * lp + 1 {
            acc[m * (2 * lq + 1) + m] += c;
        }
    }
    let start = graph.edges.partition_point(|e| e.i < i);
    for e in graph.edges[start..].iter().take_while(|e| e.i == i) {
        if e.j == i {
            continue;
        }
        let sk = system.species[e.j];
        let b = directional(&params.env, (si, sk, p, q), (lp, lq), e.distance, e.unit.expect("off-site edge"))?;
        add_into(&mut acc, &b, 1.0);
    }
    Ok(acc)
}

fn symmetrised(params: &OracleParams, system: &AtomicSystem, graph: &Graph, key: BlockKey) -> Result<HamiltonianBlock> {
    let BlockKey { i, j, p, q } = key;
    let basis = &params.basis;
    let (lp, lq) = (basis.shells(system.species[i])[p], basis.shells(system.species[j])[q]);
    let fwd = raw_block(params, system, graph, i, j, p, q)?;
    let back = raw_block(params, system, graph, j, i, q, p)?;
    let (r, c) = (2 * lp + 1, 2 * lq + 1);
    let mut data = vec![0.0; r * c];
    for a in 0..r {
        for b in 0..c {
            data[a * c + b] = params.scale * 0.5 * (fwd[a * c + b] + back[b * r + a]);
        }
    }
    HamiltonianBlock::new(lp, lq, data)
}

fn check_system(params: &OracleParams, system: &AtomicSystem) -> Result<()> {
    system.validate()?;
    let ns = params.basis.species_count();
    if let Some(s) = system.species.iter().find(|&&s| s >= ns) {
        return Err(Error::param(format!("species {s} not in the basis ({ns} species)")));
    }
    Ok(())
}

/// Block `(i, j, p, q)` of a system. Pairs beyond the cutoff are a usage error.
pub fn oracle_block(params: &OracleParams, system: &AtomicSystem, key: BlockKey) -> Result<HamiltonianBlock> {
    check_system(params, system)?;
    let n = system.len();
    if key.i >= n || key.j >= n {
        return Err(Error::param(format!("atom index out of range in {key:?}")));
    }
    let graph = build_graph(system)?;
    if graph.find(key.i, key.j).is_none() {
        return Err(Error::Usage(format!(
            "atoms {} and {} are farther apart than the cutoff",
            key.i, key.j
        )));
    }
    let (ni, nj) = (
        params.basis.shells(system.species[key.i]).len(),
        params.basis.shells(system.species[key.j]).len(),
    );
    if key.p >= ni || key.q >= nj {
        return Err(Error::param(format!("shell index out of range in {key:?}")));
    }
    symmetrised(params, system, &graph, key)
}

/// Every block of a system.
pub fn oracle_blocks(params: &OracleParams, system: &AtomicSystem) -> Result<PairBlockSet> {
    check_system(params, system)?;
    let graph = build_graph(system)?;
    let mut out = PairBlockSet::new();
    for e in &graph.edges {
        for t in params.basis.block_types(system.species[e.i], system.species[e.j]) {
            let key = BlockKey {
                i: e.i,
                j: e.j,
                p: t.p,
                q: t.q,
            };
            out.insert(key, symmetrised(params, system, &graph, key)?);
        }
    }
    Ok(out)
}
