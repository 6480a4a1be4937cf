//! Named parameter tensors and their binding onto a tape.

use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Mat, Node, Tape};
use crate::{Error, Result};

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
///
/// Random initialisers draw from a generator seeded by the store seed and the
/// tensor name, so a tensor gets the same values whatever else is registered
/// before it.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    names: Vec<String>,
    mats: Vec<Mat>,
}

/// Seed derived from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            names: Vec::new(),
            mats: Vec::new(),
        }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, name))
    }

    /// Register a tensor. Names must be unique.
    pub fn add(&mut self, name: &str, value: Mat) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::param(format!("parameter `{name}` registered twice")));
        }
        self.names.push(name.to_string());
        self.mats.push(value);
        Ok(ParamId(self.mats.len() - 1))
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> Result<ParamId> {
        let mut rng = self.rng(name);
        let data = (0..rows * cols)
            .map(|_| if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 })
            .collect();
        self.add(name, Mat::new(rows, cols, data))
    }

    /// Normal entries with the given standard deviation.
    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let mut rng = self.rng(name);
        let dist = Normal::new(0.0, std).map_err(|e| Error::param(format!("{name}: {e}")))?;
        let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
        self.add(name, Mat::new(rows, cols, data))
    }

    pub fn filled(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> Result<ParamId> {
        self.add(name, Mat::filled(rows, cols, v))
    }

    /// Handles in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.mats.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.mats[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.mats[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    /// Number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.mats.iter().map(Mat::len).sum()
    }

    pub fn mats(&self) -> &[Mat] {
        &self.mats
    }

    pub fn mats_mut(&mut self) -> &mut [Mat] {
        &mut self.mats
    }

    /// All values concatenated in registration order.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.scalar_count());
        for m in &self.mats {
            v.extend_from_slice(m.data());
        }
        v
    }

    /// Overwrite all values from a flat vector laid out as [`ParamStore::flat`].
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.scalar_count() {
            return Err(Error::param(format!(
                "expected {} parameters, got {}",
                self.scalar_count(),
                values.len()
            )));
        }
        let mut off = 0;
        for m in &mut self.mats {
            let n = m.len();
            m.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Create one differentiable leaf per tensor.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            nodes: self.mats.iter().map(|m| tape.leaf(m.clone())).collect(),
        }
    }
}

/// Parameter leaves on a particular tape, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    nodes: Vec<Node>,
}

impl Bound {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }
}

impl Index<ParamId> for Bound {
    type Output = Node;

    fn index(&self, id: ParamId) -> &Node {
        &self.nodes[id.0]
    }
}
