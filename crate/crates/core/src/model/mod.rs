//! Equivariant backbone, stacked blocks and the two decoders.
//!
//! Per module the backbone runs one message-passing step on atoms (tensor
//! products of neighbour features with edge harmonics, radially weighted)
//! and one edge update, then applies a block to the edge features. After
//! `k` modules the edge features are decoded into Hamiltonian blocks and the
//! collected `z` vectors into trace predictions.
//!
//! Predictions live in padded per-edge rows: an edge `i → j` owns a
//! `max_orb × max_orb` matrix (row-major) whose top-left corner holds the
//! `n_orb(s_i) × n_orb(s_j)` pair matrix, and `max_shells²` trace slots
//! indexed `p·max_shells + q`.

mod basis;
mod checkpoint;
mod system;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use basis::{BlockType, OrbitalBasisSpec};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub(crate) use system::distance;
pub use system::{build_graph, hermiticity_residual, AtomicSystem, BlockKey, Edge, Graph, PairBlockSet};

use crate::autodiff::{Mat, Node, Tape};
use crate::block::{block_forward, BlockParams, DirectSumSpec, Mode};
use crate::params::{Bound, ParamId, ParamStore};
use crate::so3::{coupling, sph_harm_unchecked, HamiltonianBlock};
use crate::{Error, Result};

/// Architecture and scale settings of a [`Model`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of stacked modules.
    pub k: usize,
    /// Hidden edge and node feature layout.
    pub spec: DirectSumSpec,
    /// Gaussian radial basis size on `[0, cutoff]`.
    pub radial_bins: usize,
    pub radial_hidden: usize,
    /// Width `C` of the invariant vector `u`.
    pub channels: usize,
    /// Hidden width of the invariant head.
    pub head_hidden: usize,
    /// Width of `z`; defaults to the number of block types. Gate mode forces
    /// it to the channel count of `spec`.
    pub cz: Option<usize>,
    pub mode: Mode,
    pub trace_head: bool,
    pub trace_hidden: usize,
    pub basis: OrbitalBasisSpec,
    /// Cutoff in Å; must match the data.
    pub cutoff: f64,
    /// Messages are divided by the square root of this.
    pub avg_neighbors: f64,
    /// Decoded blocks are multiplied by this (meV), traces by its square.
    pub output_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 3,
            spec: "0x8+1x8+2x4".parse().expect("valid default spec"),
            radial_bins: 16,
            radial_hidden: 32,
            channels: 64,
            head_hidden: 64,
            cz: None,
            mode: Mode::Grad,
            trace_head: true,
            trace_hidden: 64,
            basis: OrbitalBasisSpec::default(),
            cutoff: 2.2,
            avg_neighbors: 8.0,
            // The synthetic blocks are O(100 meV).
            output_scale: 100.0,
        }
    }
}

impl ModelConfig {
    /// Width of `z` actually used.
    pub fn effective_cz(&self) -> usize {
        match self.mode {
            Mode::Gate => self.spec.channel_count(),
            _ => self.cz.unwrap_or_else(|| self.basis.total_block_types()),
        }
    }

    /// Whether blocks have to run at all.
    fn blocks_active(&self) -> bool {
        self.mode != Mode::Off || self.trace_head
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.spec.position(0).is_none() {
            return bad(format!("spec {} has no degree-0 entry", self.spec));
        }
        for (lp, lq) in self.basis.degree_pairs() {
            for l in lp.abs_diff(lq)..=lp + lq {
                if self.spec.position(l).is_none() {
                    return bad(format!(
                        "spec {} lacks degree {l} needed by {lp}⊗{lq} blocks",
                        self.spec
                    ));
                }
            }
        }
        if self.radial_bins < 2 || self.radial_hidden == 0 || self.channels == 0 || self.head_hidden == 0 {
            return bad("widths must be positive and radial_bins ≥ 2".into());
        }
        if self.trace_head && self.trace_hidden == 0 {
            return bad("trace_hidden must be positive".into());
        }
        if self.cz == Some(0) {
            return bad("cz must be positive".into());
        }
        if let (Mode::Gate, Some(cz)) = (self.mode, self.cz) {
            if cz != self.spec.channel_count() {
                return bad(format!(
                    "gate mode needs cz = {} (one gate per channel), got {cz}",
                    self.spec.channel_count()
                ));
            }
        }
        for (name, v) in [
            ("cutoff", self.cutoff),
            ("avg_neighbors", self.avg_neighbors),
            ("output_scale", self.output_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    /// Width of a padded block row.
    pub fn block_width(&self) -> usize {
        let m = self.basis.max_orb();
        m * m
    }

    /// Width of a padded trace row.
    pub fn trace_width(&self) -> usize {
        let s = self.basis.max_shells();
        s * s
    }
}

/// One tensor-product path `l1 ⊗ l2 → lo` of the message step.
#[derive(Clone, Copy, Debug)]
struct Path {
    /// Spec entry of the neighbour feature.
    k1: usize,
    l1: usize,
    l2: usize,
    lo: usize,
}

#[derive(Clone, Debug)]
struct Radial {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct ModuleIds {
    radial: Radial,
    /// Per output spec entry: `(Σ path channels) × c_lo`.
    mix: Vec<ParamId>,
    /// Per spec entry: `3c × c` acting on `[h_i, h_j, m_ij]`.
    edge: Vec<ParamId>,
    block: Option<BlockParams>,
}

/// Decoder weights of one `(s_i, s_j, on-site)` group.
#[derive(Clone, Debug)]
struct DecoderGroup {
    si: usize,
    sj: usize,
    onsite: bool,
    /// Per spec entry: optional `(weight c_l × n_comp, recomposition matrix)`.
    maps: Vec<Option<(ParamId, Arc<Mat>)>>,
}

#[derive(Clone, Debug)]
struct Ids {
    embed: ParamId,
    init: Radial,
    modules: Vec<ModuleIds>,
    decoder: Vec<DecoderGroup>,
    trace: Option<Vec<(ParamId, ParamId)>>,
}

/// A model: configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    paths: Vec<Path>,
    store: ParamStore,
    ids: Ids,
}

/// Geometry-only constants of one system (or a disjoint union of systems),
/// reusable across epochs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub graph: Graph,
    species: Vec<usize>,
    systems: usize,
    node_onehot: Mat,
    radial_in: Mat,
    /// Per path: `E × (2lo+1)(2l1+1)` with `Σ_m2 C[mo, m1, m2]·Y^{l2}[m2]`.
    path_a: Vec<Mat>,
    /// Per spec entry: `E × (2l+1)` harmonics (zero on self-edges for l > 0).
    harmonics: Vec<Mat>,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    reverse: Arc<[usize]>,
    groups: Vec<Option<Arc<[usize]>>>,
    pair_features: Mat,
}

impl Prepared {
    /// Number of systems merged into this one.
    pub fn system_count(&self) -> usize {
        self.systems
    }

    /// Disjoint union of several prepared systems, edges kept in input order.
    ///
    /// All parts must come from the same model.
    pub fn concat(parts: &[&Prepared]) -> Prepared {
        let mut edges = Vec::new();
        let mut species = Vec::new();
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); parts.first().map_or(0, |p| p.groups.len())];
        let (mut atoms, mut systems) = (0, 0);
        for p in parts {
            let e0 = edges.len();
            for e in &p.graph.edges {
                edges.push(Edge {
                    i: e.i + atoms,
                    j: e.j + atoms,
                    reverse: e.reverse + e0,
                    ..e.clone()
                });
            }
            for (g, idx) in p.groups.iter().enumerate() {
                if let Some(idx) = idx {
                    groups[g].extend(idx.iter().map(|k| k + e0));
                }
            }
            species.extend_from_slice(&p.species);
            atoms += p.graph.n_atoms;
            systems += p.systems;
        }
        let stack = |f: &dyn Fn(&Prepared) -> &Mat| Mat::vstack(&parts.iter().map(|p| f(p)).collect::<Vec<_>>());
        let n_paths = parts.first().map_or(0, |p| p.path_a.len());
        let n_harm = parts.first().map_or(0, |p| p.harmonics.len());
        Prepared {
            src: edges.iter().map(|x| x.i).collect(),
            dst: edges.iter().map(|x| x.j).collect(),
            reverse: edges.iter().map(|x| x.reverse).collect(),
            graph: Graph { n_atoms: atoms, edges },
            species,
            systems,
            node_onehot: stack(&|p| &p.node_onehot),
            radial_in: stack(&|p| &p.radial_in),
            path_a: (0..n_paths).map(|k| stack(&|p| &p.path_a[k])).collect(),
            harmonics: (0..n_harm).map(|k| stack(&|p| &p.harmonics[k])).collect(),
            groups: groups.into_iter().map(|g| (!g.is_empty()).then(|| Arc::from(g))).collect(),
            pair_features: stack(&|p| &p.pair_features),
        }
    }
}

/// Nodes produced by [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    /// `E × max_orb²` padded blocks (meV).
    pub h: Node,
    /// `E × max_shells²` padded traces (meV²), if the trace head is on.
    pub t: Option<Node>,
}

/// Output of [`Model::encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Final edge features.
    pub edge: Node,
    /// `z` of every module, in order.
    pub z: Vec<Node>,
}

/// Decoded predictions of one system.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub blocks: PairBlockSet,
    pub traces: BTreeMap<BlockKey, f64>,
}

fn fan_in_bound(n: usize) -> f64 {
    1.0 / (n.max(1) as f64).sqrt()
}

fn register_radial(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, out: usize) -> Result<Radial> {
    let b1 = fan_in_bound(input);
    let b2 = fan_in_bound(hidden);
    Ok(Radial {
        w1: store.uniform(&format!("{prefix}.w1"), input, hidden, b1)?,
        b1: store.uniform(&format!("{prefix}.b1"), 1, hidden, b1)?,
        w2: store.uniform(&format!("{prefix}.w2"), hidden, out, b2)?,
        b2: store.uniform(&format!("{prefix}.b2"), 1, out, b2)?,
    })
}

/// Block-to-padded-row recomposition for one decoder group and degree `l`.
///
/// Rows are indexed `m·n_comp + comp`, columns `a·max_orb + b`.
fn recomposition(basis: &OrbitalBasisSpec, si: usize, sj: usize, l: usize) -> Result<(usize, Mat)> {
    let comps: Vec<BlockType> = basis
        .block_types(si, sj)
        .into_iter()
        .filter(|t| t.lp.abs_diff(t.lq) <= l && l <= t.lp + t.lq)
        .collect();
    let n = comps.len();
    let pad = basis.max_orb();
    let d = 2 * l + 1;
    let mut m = Mat::zeros(d * n, pad * pad);
    for (ci, t) in comps.iter().enumerate() {
        let c = coupling(l, t.lp, t.lq)?;
        let (oa, ob) = (basis.orb_offset(si, t.p), basis.orb_offset(sj, t.q));
        for &(mm, a, b, v) in c.nonzeros() {
            let row = mm * n + ci;
            let col = (oa + a) * pad + (ob + b);
            m.data_mut()[row * pad * pad + col] += v;
        }
    }
    Ok((n, m))
}

impl Model {
    /// Build a model with freshly initialised parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = config.spec.clone();
        let s = config.basis.species_count();
        let c0 = spec.multiplicity(0).expect("validated");
        let mut store = ParamStore::new(seed);
        let embed = store.normal("embed", s, c0, 1.0)?;
        let radial_in = config.radial_bins + 2 * s + 1;
        let init = register_radial(&mut store, "init.radial", radial_in, config.radial_hidden, spec.channel_count())?;

        let mut paths = Vec::new();
        for (k1, &(l1, _)) in spec.entries().iter().enumerate() {
            for l2 in 0..=spec.max_degree() {
                for &(lo, _) in spec.entries() {
                    if l1.abs_diff(l2) <= lo && lo <= l1 + l2 {
                        paths.push(Path { k1, l1, l2, lo });
                    }
                }
            }
        }
        let path_channels: usize = paths.iter().map(|p| spec.entries()[p.k1].1).sum();

        let cz = config.effective_cz();
        let mut modules = Vec::with_capacity(config.k);
        for m in 0..config.k {
            let radial = register_radial(
                &mut store,
                &format!("m{m}.radial"),
                radial_in,
                config.radial_hidden,
                path_channels,
            )?;
            let mut mix = Vec::new();
            let mut edge = Vec::new();
            for &(lo, co) in spec.entries() {
                let cin: usize = paths.iter().filter(|p| p.lo == lo).map(|p| spec.entries()[p.k1].1).sum();
                mix.push(store.uniform(&format!("m{m}.mix{lo}"), cin, co, fan_in_bound(cin))?);
                edge.push(store.uniform(&format!("m{m}.edge{lo}"), 3 * co, co, fan_in_bound(3 * co))?);
            }
            let block = if config.blocks_active() {
                Some(BlockParams::new(
                    &mut store,
                    &format!("m{m}.block"),
                    &spec,
                    config.channels,
                    config.head_hidden,
                    cz,
                )?)
            } else {
                None
            };
            modules.push(ModuleIds { radial, mix, edge, block });
        }

        let mut decoder = Vec::new();
        for si in 0..s {
            for sj in 0..s {
                for onsite in [false, true] {
                    if onsite && si != sj {
                        continue;
                    }
                    let mut maps = Vec::new();
                    for &(l, c) in spec.entries() {
                        let (n, rec) = recomposition(&config.basis, si, sj, l)?;
                        if n == 0 {
                            maps.push(None);
                            continue;
                        }
                        let tag = if onsite { "on" } else { "off" };
                        let w = store.uniform(&format!("dec.{si}.{sj}.{tag}.l{l}"), c, n, fan_in_bound(c))?;
                        maps.push(Some((w, Arc::new(rec))));
                    }
                    decoder.push(DecoderGroup { si, sj, onsite, maps });
                }
            }
        }

        let trace = if config.trace_head {
            let input = config.k * cz + 2 * s + 1;
            let widths = [input, config.trace_hidden, config.trace_hidden, config.trace_hidden, config.trace_width()];
            let mut layers = Vec::new();
            for (n, w) in widths.windows(2).enumerate() {
                let b = fan_in_bound(w[0]);
                layers.push((
                    store.uniform(&format!("trace.fc{}.w", n + 1), w[0], w[1], b)?,
                    store.uniform(&format!("trace.fc{}.b", n + 1), 1, w[1], b)?,
                ));
            }
            Some(layers)
        } else {
            None
        };

        Ok(Model {
            config,
            paths,
            store,
            ids: Ids {
                embed,
                init,
                modules,
                decoder,
                trace,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameters of block `m`, if blocks are active.
    pub fn block_params(&self, m: usize) -> Option<&BlockParams> {
        self.ids.modules.get(m).and_then(|x| x.block.as_ref())
    }

    /// Precompute the graph and every geometry-only constant of a system.
    pub fn prepare(&self, system: &AtomicSystem) -> Result<Prepared> {
        let cfg = &self.config;
        if (system.cutoff - cfg.cutoff).abs() > 1e-12 {
            return Err(Error::param(format!(
                "system cutoff {} differs from the model cutoff {}",
                system.cutoff, cfg.cutoff
            )));
        }
        let s = cfg.basis.species_count();
        if let Some(&bad) = system.species.iter().find(|&&x| x >= s) {
            return Err(Error::param(format!("species {bad} not in the basis ({s} species)")));
        }
        let graph = build_graph(system)?;
        let e = graph.len();
        let n = system.len();
        let spec = &cfg.spec;

        let mut node_onehot = Mat::zeros(n, s);
        for (i, &sp) in system.species.iter().enumerate() {
            node_onehot.data_mut()[i * s + sp] = 1.0;
        }

        let bins = cfg.radial_bins;
        let width = cfg.cutoff / (bins - 1) as f64;
        let pw = 2 * s + 1;
        let mut radial_in = Mat::zeros(e, bins + pw);
        let mut pair_features = Mat::zeros(e, pw);
        let lmax = spec.max_degree();
        let mut harm_all: Vec<Mat> = (0..=lmax).map(|l| Mat::zeros(e, 2 * l + 1)).collect();
        for (k, edge) in graph.edges.iter().enumerate() {
            let d = edge.distance;
            let row = &mut radial_in.data_mut()[k * (bins + pw)..(k + 1) * (bins + pw)];
            for b in 0..bins {
                let x = (d - b as f64 * width) / width;
                row[b] = (-0.5 * x * x).exp();
            }
            let pf = &mut pair_features.data_mut()[k * pw..(k + 1) * pw];
            pf[system.species[edge.i]] = 1.0;
            pf[s + system.species[edge.j]] = 1.0;
            pf[2 * s] = if edge.i == edge.j { 1.0 } else { 0.0 };
            row[bins..].copy_from_slice(pf);
            for (l, h) in harm_all.iter_mut().enumerate() {
                let y = match edge.unit {
                    Some(u) => sph_harm_unchecked(l, u),
                    None if l == 0 => sph_harm_unchecked(0, [0.0, 0.0, 1.0]),
                    None => vec![0.0; 2 * l + 1],
                };
                h.data_mut()[k * (2 * l + 1)..(k + 1) * (2 * l + 1)].copy_from_slice(&y);
            }
        }

        let mut path_a = Vec::with_capacity(self.paths.len());
        for p in &self.paths {
            let c = coupling(p.lo, p.l1, p.l2)?;
            let (d_o, d_1, d_2) = (2 * p.lo + 1, 2 * p.l1 + 1, 2 * p.l2 + 1);
            let mut a = Mat::zeros(e, d_o * d_1);
            for k in 0..e {
                let y = &harm_all[p.l2].data()[k * d_2..(k + 1) * d_2];
                let row = &mut a.data_mut()[k * d_o * d_1..(k + 1) * d_o * d_1];
                for &(mo, m1, m2, v) in c.nonzeros() {
                    row[mo * d_1 + m1] += v * y[m2];
                }
            }
            path_a.push(a);
        }
        let harmonics = spec.entries().iter().map(|&(l, _)| harm_all[l].clone()).collect();

        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); self.ids.decoder.len()];
        for (k, edge) in graph.edges.iter().enumerate() {
            let (si, sj, on) = (system.species[edge.i], system.species[edge.j], edge.i == edge.j);
            let g = self
                .ids
                .decoder
                .iter()
                .position(|g| g.si == si && g.sj == sj && g.onsite == on)
                .expect("every species pair has a decoder group");
            groups[g].push(k);
        }

        Ok(Prepared {
            src: graph.edges.iter().map(|x| x.i).collect(),
            dst: graph.edges.iter().map(|x| x.j).collect(),
            reverse: graph.edges.iter().map(|x| x.reverse).collect(),
            graph,
            species: system.species.clone(),
            systems: 1,
            node_onehot,
            radial_in,
            path_a,
            harmonics,
            groups: groups.into_iter().map(|g| (!g.is_empty()).then(|| Arc::from(g))).collect(),
            pair_features,
        })
    }

    fn radial(&self, tape: &mut Tape, bound: &Bound, r: &Radial, prep: &Prepared) -> Result<Node> {
        let x = tape.constant(prep.radial_in.clone());
        let h = tape.linear(x, bound[r.w1], bound[r.b1])?;
        let h = tape.silu(h)?;
        tape.linear(h, bound[r.w2], bound[r.b2])
    }

    /// Per-degree channel mixing `x_l ↦ x_l·W_l` on a `rows × (2l+1)·c` block.
    fn mix_degree(tape: &mut Tape, x: Node, d: usize, w: Node) -> Result<Node> {
        let (rows, width) = tape.shape(x);
        let c = width / d;
        let flat = tape.reshape(x, rows * d, c)?;
        let y = tape.matmul(flat, w)?;
        let co = tape.shape(y).1;
        tape.reshape(y, rows, d * co)
    }

    /// Repeat a `rows × c` gate over the `2l+1` components of a `[m][c]` block.
    fn repeat_gate(tape: &mut Tape, g: Node, d: usize) -> Result<Node> {
        if d == 1 {
            return Ok(g);
        }
        tape.concat_cols(&vec![g; d])
    }

    fn initial_features(&self, tape: &mut Tape, bound: &Bound, prep: &Prepared) -> Result<(Node, Node)> {
        let spec = &self.config.spec;
        let onehot = tape.constant(prep.node_onehot.clone());
        let h0 = tape.matmul(onehot, bound[self.ids.embed])?;
        let h = tape.embed_cols(h0, 0, spec.total_dim())?;

        let r = self.radial(tape, bound, &self.ids.init, prep)?;
        let mut parts = Vec::new();
        let mut off = 0;
        for (k, &(l, c)) in spec.entries().iter().enumerate() {
            let w = tape.slice_cols(r, off, c)?;
            off += c;
            let y = tape.constant(prep.harmonics[k].clone());
            parts.push(tape.batch_matmul(y, (2 * l + 1, 1), false, w, (1, c), false)?);
        }
        let e = tape.concat_cols(&parts)?;
        Ok((h, e))
    }

    /// One message-passing step on atoms followed by an edge update.
    /// Returns the new node and edge features.
    pub fn backbone_layer(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        module: usize,
        prep: &Prepared,
        h: Node,
        e: Node,
    ) -> Result<(Node, Node)> {
        let spec = &self.config.spec;
        let ids = &self.ids.modules[module];
        let n_atoms = prep.graph.n_atoms;
        let n_edges = prep.graph.len();
        let hj = tape.gather_rows(h, prep.dst.clone())?;
        let radial = self.radial(tape, bound, &ids.radial, prep)?;

        let mut per_out: Vec<Vec<Node>> = vec![Vec::new(); spec.entries().len()];
        let mut roff = 0;
        for (pi, p) in self.paths.iter().enumerate() {
            let c1 = spec.entries()[p.k1].1;
            let (d_o, d_1) = (2 * p.lo + 1, 2 * p.l1 + 1);
            let f = tape.slice_cols(hj, spec.offset(p.k1), d_1 * c1)?;
            let a = tape.constant(prep.path_a[pi].clone());
            let t = tape.batch_matmul(a, (d_o, d_1), false, f, (d_1, c1), false)?;
            let w = tape.slice_cols(radial, roff, c1)?;
            roff += c1;
            let w = Self::repeat_gate(tape, w, d_o)?;
            let t = tape.mul(t, w)?;
            let t = tape.reshape(t, n_edges * d_o, c1)?;
            let ko = spec.position(p.lo).expect("paths only target spec degrees");
            per_out[ko].push(t);
        }

        let mut msg_parts = Vec::new();
        for (ko, &(lo, _)) in spec.entries().iter().enumerate() {
            let cat = tape.concat_cols(&per_out[ko])?;
            let y = tape.matmul(cat, bound[ids.mix[ko]])?;
            let co = tape.shape(y).1;
            msg_parts.push(tape.reshape(y, n_edges, (2 * lo + 1) * co)?);
        }
        let msg = tape.concat_cols(&msg_parts)?;
        let agg = tape.scatter_add_rows(msg, prep.src.clone(), n_atoms)?;
        let agg = tape.scale(agg, 1.0 / self.config.avg_neighbors.sqrt())?;
        let h_new = tape.add(h, agg)?;

        let hi = tape.gather_rows(h_new, prep.src.clone())?;
        let hj = tape.gather_rows(h_new, prep.dst.clone())?;
        let mut upd = Vec::new();
        for (k, &(l, c)) in spec.entries().iter().enumerate() {
            let d = 2 * l + 1;
            let mut blocks = Vec::new();
            for src in [hi, hj, msg] {
                let s = tape.slice_cols(src, spec.offset(k), d * c)?;
                blocks.push(tape.reshape(s, n_edges * d, c)?);
            }
            let cat = tape.concat_cols(&blocks)?;
            let y = tape.matmul(cat, bound[ids.edge[k]])?;
            upd.push(tape.reshape(y, n_edges, d * c)?);
        }
        let upd = tape.concat_cols(&upd)?;
        let e_new = tape.add(e, upd)?;
        Ok((h_new, e_new))
    }

    /// Run all modules; returns the final edge features and each module's `z`.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, prep: &Prepared) -> Result<Encoded> {
        let (mut h, mut e) = self.initial_features(tape, bound, prep)?;
        let mut zs = Vec::new();
        for m in 0..self.config.k {
            let (h2, e2) = self.backbone_layer(tape, bound, m, prep, h, e)?;
            h = h2;
            e = e2;
            if let Some(bp) = &self.ids.modules[m].block {
                let out = block_forward(tape, bound, bp, e, self.config.mode)?;
                e = out.o;
                zs.push(out.z);
            }
        }
        Ok(Encoded { edge: e, z: zs })
    }

    /// Padded blocks from final edge features, symmetrised so that the block of
    /// `j → i` is the transpose of the block of `i → j`.
    pub fn decode_blocks(&self, tape: &mut Tape, bound: &Bound, prep: &Prepared, edge: Node) -> Result<Node> {
        let spec = &self.config.spec;
        let n_edges = prep.graph.len();
        let width = self.config.block_width();
        let mut total: Option<Node> = None;
        for (g, group) in self.ids.decoder.iter().enumerate() {
            let Some(index) = &prep.groups[g] else { continue };
            let eg = tape.gather_rows(edge, index.clone())?;
            let mut hg: Option<Node> = None;
            for (k, &(l, c)) in spec.entries().iter().enumerate() {
                let Some((w, rec)) = &group.maps[k] else { continue };
                let d = 2 * l + 1;
                let f = tape.slice_cols(eg, spec.offset(k), d * c)?;
                let comps = Self::mix_degree(tape, f, d, bound[*w])?;
                let rec = tape.constant((**rec).clone());
                let part = tape.matmul(comps, rec)?;
                hg = Some(match hg {
                    None => part,
                    Some(prev) => tape.add(prev, part)?,
                });
            }
            let Some(hg) = hg else { continue };
            let placed = tape.scatter_add_rows(hg, index.clone(), n_edges)?;
            total = Some(match total {
                None => placed,
                Some(prev) => tape.add(prev, placed)?,
            });
        }
        let h = match total {
            Some(h) => h,
            None => tape.constant(Mat::zeros(n_edges, width)),
        };
        let pad = self.config.basis.max_orb();
        let mut perm = Mat::zeros(width, width);
        for a in 0..pad {
            for b in 0..pad {
                perm.data_mut()[(a * pad + b) * width + b * pad + a] = 1.0;
            }
        }
        let perm = tape.constant(perm);
        let ht = tape.matmul(h, perm)?;
        let hr = tape.gather_rows(ht, prep.reverse.clone())?;
        let sum = tape.add(h, hr)?;
        tape.scale(sum, 0.5 * self.config.output_scale)
    }

    /// Trace predictions from the concatenated `z` of all modules.
    pub fn decode_trace(&self, tape: &mut Tape, bound: &Bound, prep: &Prepared, z: &[Node]) -> Result<Node> {
        let Some(layers) = &self.ids.trace else {
            return Err(Error::Usage("the trace head is disabled in this model".into()));
        };
        if z.len() != self.config.k {
            return Err(Error::param(format!("expected {} z vectors, got {}", self.config.k, z.len())));
        }
        let pf = tape.constant(prep.pair_features.clone());
        let mut parts = z.to_vec();
        parts.push(pf);
        let mut x = tape.concat_cols(&parts)?;
        for (n, &(w, b)) in layers.iter().enumerate() {
            x = tape.linear(x, bound[w], bound[b])?;
            if n + 1 < layers.len() {
                x = tape.silu(x)?;
            }
        }
        let s = self.config.output_scale;
        tape.scale(x, s * s)
    }

    /// Full pipeline on a tape.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, prep: &Prepared) -> Result<ForwardOut> {
        let enc = self.encode(tape, bound, prep)?;
        let h = self.decode_blocks(tape, bound, prep, enc.edge)?;
        let t = if self.config.trace_head {
            Some(self.decode_trace(tape, bound, prep, &enc.z)?)
        } else {
            None
        };
        Ok(ForwardOut { h, t })
    }

    /// Predict blocks and traces for a system.
    pub fn predict(&self, system: &AtomicSystem) -> Result<Prediction> {
        let prep = self.prepare(system)?;
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, &prep)?;
        let traces = out.t.map(|t| tape.value(t).clone());
        self.unpack(&prep, tape.value(out.h), traces.as_ref())
    }

    /// Convert padded rows into keyed blocks and traces.
    pub fn unpack(&self, prep: &Prepared, h: &Mat, t: Option<&Mat>) -> Result<Prediction> {
        let basis = &self.config.basis;
        let pad = basis.max_orb();
        let ms = basis.max_shells();
        let mut blocks = PairBlockSet::new();
        let mut traces = BTreeMap::new();
        for (k, e) in prep.graph.edges.iter().enumerate() {
            let (si, sj) = (prep.species[e.i], prep.species[e.j]);
            let row = h.row_slice(k);
            for bt in basis.block_types(si, sj) {
                let (oa, ob) = (basis.orb_offset(si, bt.p), basis.orb_offset(sj, bt.q));
                let (np, nq) = (2 * bt.lp + 1, 2 * bt.lq + 1);
                let mut data = Vec::with_capacity(np * nq);
                for a in 0..np {
                    for b in 0..nq {
                        data.push(row[(oa + a) * pad + ob + b]);
                    }
                }
                let key = BlockKey {
                    i: e.i,
                    j: e.j,
                    p: bt.p,
                    q: bt.q,
                };
                if let Some(x) = data.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        index: k,
                        message: format!("predicted block {key:?} entry {x} is not finite"),
                    });
                }
                blocks.insert(key, HamiltonianBlock::new(bt.lp, bt.lq, data)?);
                if let Some(t) = t {
                    traces.insert(key, t.get(k, bt.p * ms + bt.q));
                }
            }
        }
        Ok(Prediction { blocks, traces })
    }

    /// Padded target rows `(H, H mask, T, T mask)` for a system's blocks.
    pub fn pack_targets(
        &self,
        prep: &Prepared,
        blocks: &PairBlockSet,
        traces: &BTreeMap<BlockKey, f64>,
    ) -> Result<(Mat, Mat, Mat, Mat)> {
        let basis = &self.config.basis;
        let pad = basis.max_orb();
        let ms = basis.max_shells();
        let e = prep.graph.len();
        let mut h = Mat::zeros(e, pad * pad);
        let mut hm = Mat::zeros(e, pad * pad);
        let mut t = Mat::zeros(e, ms * ms);
        let mut tm = Mat::zeros(e, ms * ms);
        let mut seen = 0;
        for (k, edge) in prep.graph.edges.iter().enumerate() {
            let (si, sj) = (prep.species[edge.i], prep.species[edge.j]);
            for bt in basis.block_types(si, sj) {
                let key = BlockKey {
                    i: edge.i,
                    j: edge.j,
                    p: bt.p,
                    q: bt.q,
                };
                let b = blocks
                    .get(&key)
                    .ok_or_else(|| Error::param(format!("target block {key:?} missing")))?;
                if (b.lp, b.lq) != (bt.lp, bt.lq) {
                    return Err(Error::param(format!("target block {key:?} has degrees {}⊗{}", b.lp, b.lq)));
                }
                seen += 1;
                let (oa, ob) = (basis.orb_offset(si, bt.p), basis.orb_offset(sj, bt.q));
                let nq = 2 * bt.lq + 1;
                for a in 0..2 * bt.lp + 1 {
                    for c in 0..nq {
                        let col = (oa + a) * pad + ob + c;
                        h.data_mut()[k * pad * pad + col] = b.data()[a * nq + c];
                        hm.data_mut()[k * pad * pad + col] = 1.0;
                    }
                }
                let tv = *traces
                    .get(&key)
                    .ok_or_else(|| Error::param(format!("target trace {key:?} missing")))?;
                t.data_mut()[k * ms * ms + bt.p * ms + bt.q] = tv;
                tm.data_mut()[k * ms * ms + bt.p * ms + bt.q] = 1.0;
            }
        }
        if seen != blocks.len() {
            return Err(Error::param(format!(
                "{} target blocks but the graph has {seen} block slots",
                blocks.len()
            )));
        }
        Ok((h, hm, t, tm))
    }
}
