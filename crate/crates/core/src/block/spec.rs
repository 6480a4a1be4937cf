use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::so3::{wigner_d, Rotation, WignerD, L_MAX};
use crate::{Error, Result};

/// Degrees and channel counts of a direct-sum feature.
///
/// Entries are `(l, multiplicity)` with strictly increasing `l`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DirectSumSpec {
    entries: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    total: usize,
}

impl DirectSumSpec {
    pub fn new(entries: Vec<(usize, usize)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::param("a direct-sum spec needs at least one entry"));
        }
        for (k, &(l, c)) in entries.iter().enumerate() {
            if l > L_MAX {
                return Err(Error::Capability(format!("degree {l} exceeds l_max = {L_MAX}")));
            }
            if c == 0 {
                return Err(Error::param(format!("degree {l} has zero multiplicity")));
            }
            if k > 0 && entries[k - 1].0 >= l {
                return Err(Error::param("spec degrees must be strictly increasing"));
            }
        }
        let mut offsets = Vec::with_capacity(entries.len());
        let mut total = 0;
        for &(l, c) in &entries {
            offsets.push(total);
            total += (2 * l + 1) * c;
        }
        Ok(DirectSumSpec {
            entries,
            offsets,
            total,
        })
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    /// Σ multiplicity·(2l+1).
    pub fn total_dim(&self) -> usize {
        self.total
    }

    /// Column offset of entry `k`.
    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    /// Total number of channel copies, Σ multiplicity.
    pub fn channel_count(&self) -> usize {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn max_degree(&self) -> usize {
        self.entries.last().map(|e| e.0).unwrap_or(0)
    }

    /// Index of the entry with degree `l`.
    pub fn position(&self, l: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.0 == l)
    }

    pub fn multiplicity(&self, l: usize) -> Option<usize> {
        self.position(l).map(|k| self.entries[k].1)
    }

    /// Apply `D^l(r)` to every entry of every row of `x`.
    pub fn rotate_rows(&self, x: &Mat, r: &Rotation) -> Result<Mat> {
        if x.cols() != self.total {
            return Err(Error::param("row width does not match spec"));
        }
        let ds = self.wigner(r)?;
        let mut out = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let row = self.rotate_with(&ds, x.row_slice(i));
            out.data_mut()[i * self.total..(i + 1) * self.total].copy_from_slice(&row);
        }
        Ok(out)
    }

    pub(crate) fn wigner(&self, r: &Rotation) -> Result<Vec<WignerD>> {
        self.entries.iter().map(|&(l, _)| wigner_d(l, r)).collect()
    }

    pub(crate) fn rotate_with(&self, ds: &[WignerD], data: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for (k, &(l, c)) in self.entries.iter().enumerate() {
            let off = self.offsets[k];
            out.extend(ds[k].apply_channels(&data[off..off + (2 * l + 1) * c], c));
        }
        out
    }
}

impl TryFrom<String> for DirectSumSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DirectSumSpec> for String {
    fn from(s: DirectSumSpec) -> Self {
        s.to_string()
    }
}

/// Written as `0x8+1x8+2x4`.
impl fmt::Display for DirectSumSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, (l, c)) in self.entries.iter().enumerate() {
            if k > 0 {
                f.write_str("+")?;
            }
            write!(f, "{l}x{c}")?;
        }
        Ok(())
    }
}

impl FromStr for DirectSumSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let entries = s
            .split('+')
            .map(|part| {
                let (l, c) = part
                    .trim()
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("bad spec entry `{part}`, expected `LxC`")))?;
                let parse = |t: &str| {
                    t.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::Config(format!("bad spec entry `{part}`: {e}")))
                };
                Ok((parse(l)?, parse(c)?))
            })
            .collect::<Result<Vec<_>>>()?;
        DirectSumSpec::new(entries)
    }
}

/// A single direct-sum feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivariantFeature {
    spec: DirectSumSpec,
    data: Vec<f64>,
}

impl EquivariantFeature {
    pub fn new(spec: DirectSumSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != spec.total_dim() {
            return Err(Error::param(format!(
                "{} values for spec {} of dimension {}",
                data.len(),
                spec,
                spec.total_dim()
            )));
        }
        Ok(EquivariantFeature { spec, data })
    }

    pub fn zeros(spec: DirectSumSpec) -> Self {
        let data = vec![0.0; spec.total_dim()];
        EquivariantFeature { spec, data }
    }

    pub fn spec(&self) -> &DirectSumSpec {
        &self.spec
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Block of entry `k`, `(2l+1) × c` row-major.
    pub fn entry(&self, k: usize) -> &[f64] {
        let (l, c) = self.spec.entries[k];
        let off = self.spec.offsets[k];
        &self.data[off..off + (2 * l + 1) * c]
    }

    /// The feature as a `1 × dim` matrix.
    pub fn to_row(&self) -> Mat {
        Mat::row(self.data.clone())
    }

    /// `D^l(r)` applied entry by entry.
    pub fn rotated(&self, r: &Rotation) -> Result<Self> {
        let ds = self.spec.wigner(r)?;
        Ok(EquivariantFeature {
            spec: self.spec.clone(),
            data: self.spec.rotate_with(&ds, &self.data),
        })
    }
}
