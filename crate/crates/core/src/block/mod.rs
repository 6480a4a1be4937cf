//! The invariant head and the equivariant features it induces.
//!
//! A feature batch is a tape node of shape `rows × spec.total_dim()`. Inside
//! a row, entries follow the spec order and each entry of degree `l` with `c`
//! channels is stored as a `(2l+1) × c` row-major block (`[m][channel]`).
//!
//! From a feature `f` the block computes invariants `u_c = Σ W^c_ij ⟨f^i, f^j⟩ /
//! √(2l+1)` over same-degree channel pairs, maps them through a small
//! network to `z`, and then builds an equivariant update either as the
//! gradient `v = ∂(Σ_c z_c)/∂f` or as the gated product `v = z · f`.

mod spec;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use spec::{DirectSumSpec, EquivariantFeature};

use crate::autodiff::{Node, Tape};
use crate::params::{Bound, ParamId, ParamStore};
use crate::{Error, Result};

/// How a block turns invariants back into an equivariant update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// `o = f + ∂(Σ z)/∂f`.
    Grad,
    /// `o = f + z · f`, one gate per channel.
    Gate,
    /// `o = f`; `z` is still available to a trace head.
    Off,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Grad => "grad",
            Mode::Gate => "gate",
            Mode::Off => "off",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(Mode::Grad),
            "gate" => Ok(Mode::Gate),
            "off" => Ok(Mode::Off),
            other => Err(Error::Config(format!("unknown mode `{other}` (grad, gate or off)"))),
        }
    }
}

#[derive(Clone, Debug)]
struct MlpIds {
    fc1: ParamId,
    b1: ParamId,
    g1: ParamId,
    beta1: ParamId,
    fc2: ParamId,
    b2: ParamId,
    g2: ParamId,
    beta2: ParamId,
    fc3: ParamId,
    b3: ParamId,
}

/// Parameters of one block, as handles into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BlockParams {
    spec: DirectSumSpec,
    channels: usize,
    cz: usize,
    /// One `c_l² × C` matrix per spec entry.
    w: Vec<ParamId>,
    mlp: Option<MlpIds>,
}

impl BlockParams {
    /// Register a block with a three-layer head `C → hidden → hidden → cz`.
    ///
    /// Fully connected layers start uniform in `±1/√fan_in` except the last
    /// one, which starts at zero so that `v = 0` and `z = 0` before training.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spec: &DirectSumSpec,
        channels: usize,
        hidden: usize,
        cz: usize,
    ) -> Result<Self> {
        if channels == 0 || hidden == 0 || cz == 0 {
            return Err(Error::param("block widths must be positive"));
        }
        let w = Self::register_w(store, prefix, spec, channels)?;
        let b_in = 1.0 / (channels as f64).sqrt();
        let b_h = 1.0 / (hidden as f64).sqrt();
        let p = |s: &str| format!("{prefix}.{s}");
        let mlp = MlpIds {
            fc1: store.uniform(&p("fc1.w"), channels, hidden, b_in)?,
            b1: store.uniform(&p("fc1.b"), 1, hidden, b_in)?,
            g1: store.filled(&p("ln1.gain"), 1, hidden, 1.0)?,
            beta1: store.filled(&p("ln1.bias"), 1, hidden, 0.0)?,
            fc2: store.uniform(&p("fc2.w"), hidden, hidden, b_h)?,
            b2: store.uniform(&p("fc2.b"), 1, hidden, b_h)?,
            g2: store.filled(&p("ln2.gain"), 1, hidden, 1.0)?,
            beta2: store.filled(&p("ln2.bias"), 1, hidden, 0.0)?,
            fc3: store.filled(&p("fc3.w"), hidden, cz, 0.0)?,
            b3: store.filled(&p("fc3.b"), 1, cz, 0.0)?,
        };
        Ok(BlockParams {
            spec: spec.clone(),
            channels,
            cz,
            w,
            mlp: Some(mlp),
        })
    }

    /// A block whose head is the identity, `z = u` (so `cz = C`).
    pub fn identity_head(store: &mut ParamStore, prefix: &str, spec: &DirectSumSpec, channels: usize) -> Result<Self> {
        let w = Self::register_w(store, prefix, spec, channels)?;
        Ok(BlockParams {
            spec: spec.clone(),
            channels,
            cz: channels,
            w,
            mlp: None,
        })
    }

    fn register_w(store: &mut ParamStore, prefix: &str, spec: &DirectSumSpec, channels: usize) -> Result<Vec<ParamId>> {
        let pairs: usize = spec.entries().iter().map(|&(_, c)| c * c).sum();
        let std = 1.0 / (pairs as f64).sqrt();
        spec.entries()
            .iter()
            .map(|&(l, c)| store.normal(&format!("{prefix}.w{l}"), c * c, channels, std))
            .collect()
    }

    pub fn spec(&self) -> &DirectSumSpec {
        &self.spec
    }

    /// Width `C` of `u`.
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Width of `z`.
    pub fn cz(&self) -> usize {
        self.cz
    }

    /// Handle of the `W` matrix of spec entry `k` (`c_k² × C`, row `i·c_k + j`).
    pub fn w(&self, k: usize) -> ParamId {
        self.w[k]
    }

    /// Handles of the final head layer (weight, bias), if the head is a network.
    pub fn final_layer(&self) -> Option<(ParamId, ParamId)> {
        self.mlp.as_ref().map(|m| (m.fc3, m.b3))
    }

    fn check_feature(&self, tape: &Tape, f: Node) -> Result<()> {
        let width = tape.shape(f).1;
        if width != self.spec.total_dim() {
            return Err(Error::param(format!(
                "feature width {width} does not match spec {} (dim {})",
                self.spec,
                self.spec.total_dim()
            )));
        }
        Ok(())
    }
}

/// `u = Σ_l Σ_ij W^c_ij ⟨f^i, f^j⟩/√(2l+1)` for every row of `f`.
pub fn cg_decomp_ext(tape: &mut Tape, bound: &Bound, params: &BlockParams, f: Node) -> Result<Node> {
    params.check_feature(tape, f)?;
    let mut u: Option<Node> = None;
    for (k, &(l, c)) in params.spec.entries().iter().enumerate() {
        let d = 2 * l + 1;
        let fk = tape.slice_cols(f, params.spec.offset(k), d * c)?;
        let gram = tape.batch_matmul(fk, (d, c), true, fk, (d, c), false)?;
        let t = tape.matmul(gram, bound[params.w[k]])?;
        let t = tape.scale(t, 1.0 / (d as f64).sqrt())?;
        u = Some(match u {
            None => t,
            Some(prev) => tape.add(prev, t)?,
        });
    }
    u.ok_or_else(|| Error::param("empty spec"))
}

/// `z = FC₃(LN(SiLU(FC₂(LN(SiLU(FC₁(u)))))))`, with learnable gain and bias in
/// each layer norm. The identity head returns `u`.
pub fn s_nonlin(tape: &mut Tape, bound: &Bound, params: &BlockParams, u: Node) -> Result<Node> {
    if tape.shape(u).1 != params.channels {
        return Err(Error::param(format!(
            "invariant width {} but the head expects {}",
            tape.shape(u).1,
            params.channels
        )));
    }
    let Some(m) = &params.mlp else {
        return Ok(u);
    };
    let h = tape.linear(u, bound[m.fc1], bound[m.b1])?;
    let h = silu_norm(tape, h, bound[m.g1], bound[m.beta1])?;
    let h = tape.linear(h, bound[m.fc2], bound[m.b2])?;
    let h = silu_norm(tape, h, bound[m.g2], bound[m.beta2])?;
    tape.linear(h, bound[m.fc3], bound[m.b3])
}

fn silu_norm(tape: &mut Tape, h: Node, gain: Node, bias: Node) -> Result<Node> {
    let h = tape.silu(h)?;
    let h = tape.layer_norm(h)?;
    let rows = tape.shape(h).0;
    let gain = tape.broadcast_rows(gain, rows)?;
    let h = tape.mul(h, gain)?;
    tape.add_row(h, bias)
}

fn induce_with_z(tape: &mut Tape, bound: &Bound, params: &BlockParams, f: Node) -> Result<(Node, Node)> {
    if !tape.is_differentiable(f) {
        return Err(Error::Usage("grad_induce needs a feature recorded as differentiable".into()));
    }
    let u = cg_decomp_ext(tape, bound, params, f)?;
    let z = s_nonlin(tape, bound, params, u)?;
    let total = tape.sum(z)?;
    let v = tape.grad(total, &[f])?[0];
    Ok((v, z))
}

/// `v = ∂(Σ_c z_c)/∂f`, recorded on the tape so that it can be trained through.
///
/// Rows do not interact inside the block, so summing over the whole batch
/// gives each row its own gradient.
pub fn grad_induce(tape: &mut Tape, bound: &Bound, params: &BlockParams, f: Node) -> Result<Node> {
    induce_with_z(tape, bound, params, f).map(|(v, _)| v)
}

/// `v = z · f` with channel `k` of `z` gating the `k`-th channel copy of the
/// spec (channels counted in spec order).
pub fn gated_induce(tape: &mut Tape, spec: &DirectSumSpec, f: Node, z: Node) -> Result<Node> {
    let (rows, width) = tape.shape(f);
    if width != spec.total_dim() {
        return Err(Error::param("feature width does not match spec"));
    }
    if tape.shape(z) != (rows, spec.channel_count()) {
        return Err(Error::param(format!(
            "gating needs {} channels per row, got {:?}",
            spec.channel_count(),
            tape.shape(z)
        )));
    }
    let mut parts = Vec::new();
    let mut gate_off = 0;
    for &(l, c) in spec.entries() {
        let g = tape.slice_cols(z, gate_off, c)?;
        gate_off += c;
        for _ in 0..(2 * l + 1) {
            parts.push(g);
        }
    }
    let gates = tape.concat_cols(&parts)?;
    tape.mul(gates, f)
}

/// `o = f + v`.
pub fn residual_merge(tape: &mut Tape, f: Node, v: Node) -> Result<Node> {
    if tape.shape(f) != tape.shape(v) {
        return Err(Error::param("residual merge of features with different specs"));
    }
    tape.add(f, v)
}

/// Result of [`block_forward`].
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub o: Node,
    pub z: Node,
}

/// Run one block in the given mode.
pub fn block_forward(tape: &mut Tape, bound: &Bound, params: &BlockParams, f: Node, mode: Mode) -> Result<BlockOutput> {
    match mode {
        Mode::Grad => {
            let (v, z) = induce_with_z(tape, bound, params, f)?;
            let o = residual_merge(tape, f, v)?;
            Ok(BlockOutput { o, z })
        }
        Mode::Gate => {
            let u = cg_decomp_ext(tape, bound, params, f)?;
            let z = s_nonlin(tape, bound, params, u)?;
            let v = gated_induce(tape, &params.spec, f, z)?;
            let o = residual_merge(tape, f, v)?;
            Ok(BlockOutput { o, z })
        }
        Mode::Off => {
            let u = cg_decomp_ext(tape, bound, params, f)?;
            let z = s_nonlin(tape, bound, params, u)?;
            Ok(BlockOutput { o: f, z })
        }
    }
}
