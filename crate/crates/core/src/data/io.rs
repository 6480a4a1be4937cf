//! Dataset files: one JSON header line followed by one JSON record per line.
//!
//! The header carries the format tag and version, `l_max`, the orbital basis,
//! the cutoff, the oracle seed and scale, the record count and a SHA-256 over
//! every record line (each including its trailing newline). Records are
//! numbered by line, so the header is record 0 and the first system is
//! record 1.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetRecord, Split};
use crate::model::{AtomicSystem, BlockKey, OrbitalBasisSpec, PairBlockSet};
use crate::so3::{HamiltonianBlock, TraceLabel, L_MAX};
use crate::{Error, Result};

pub const DATASET_FORMAT: &str = "tracegrad-dataset";
pub const DATASET_VERSION: u32 = 1;

/// First line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub l_max: usize,
    pub basis: OrbitalBasisSpec,
    pub cutoff: f64,
    pub oracle_seed: u64,
    pub oracle_scale: f64,
    pub records: usize,
    pub checksum: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockEntry {
    i: usize,
    j: usize,
    p: usize,
    q: usize,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceEntry {
    i: usize,
    j: usize,
    p: usize,
    q: usize,
    value: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    split: Split,
    positions: Vec<[f64; 3]>,
    species: Vec<usize>,
    cutoff: f64,
    blocks: Vec<BlockEntry>,
    traces: Vec<TraceEntry>,
}

fn to_line(r: &DatasetRecord) -> String {
    let line = RecordLine {
        split: r.split,
        positions: r.system.positions.clone(),
        species: r.system.species.clone(),
        cutoff: r.system.cutoff,
        blocks: r
            .blocks
            .iter()
            .map(|(k, b)| BlockEntry {
                i: k.i,
                j: k.j,
                p: k.p,
                q: k.q,
                shape: [b.rows(), b.cols()],
                data: b.data().to_vec(),
            })
            .collect(),
        traces: r
            .traces
            .iter()
            .map(|(k, t)| TraceEntry {
                i: k.i,
                j: k.j,
                p: k.p,
                q: k.q,
                value: t.0,
            })
            .collect(),
    };
    serde_json::to_string(&line).expect("records serialise")
}

fn from_line(line: &str, basis: &OrbitalBasisSpec) -> Result<DatasetRecord> {
    let raw: RecordLine = serde_json::from_str(line).map_err(|e| Error::param(e.to_string()))?;
    let system = AtomicSystem::new(raw.positions, raw.species, raw.cutoff)?;
    let mut blocks = PairBlockSet::new();
    for b in raw.blocks {
        let key = BlockKey {
            i: b.i,
            j: b.j,
            p: b.p,
            q: b.q,
        };
        if b.shape[0] % 2 == 0 || b.shape[1] % 2 == 0 {
            return Err(Error::param(format!("block {key:?} has even shape {:?}", b.shape)));
        }
        let blk = HamiltonianBlock::new((b.shape[0] - 1) / 2, (b.shape[1] - 1) / 2, b.data)?;
        if blocks.insert(key, blk).is_some() {
            return Err(Error::param(format!("duplicate block {key:?}")));
        }
    }
    let mut traces = BTreeMap::new();
    for t in raw.traces {
        let key = BlockKey {
            i: t.i,
            j: t.j,
            p: t.p,
            q: t.q,
        };
        if traces.insert(key, TraceLabel(t.value)).is_some() {
            return Err(Error::param(format!("duplicate trace {key:?}")));
        }
    }
    let record = DatasetRecord {
        split: raw.split,
        system,
        blocks,
        traces,
    };
    record.validate(basis)?;
    Ok(record)
}

fn digest(lines: &[String]) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Write records under a header built from `oracle_seed`, `oracle_scale`, the
/// basis and the cutoff. The file is written to a temporary sibling first
/// and renamed, so readers never see a partial file.
pub fn write_dataset(
    path: &Path,
    basis: &OrbitalBasisSpec,
    cutoff: f64,
    oracle_seed: u64,
    oracle_scale: f64,
    records: &[DatasetRecord],
) -> Result<DatasetHeader> {
    let lines: Vec<String> = records.iter().map(to_line).collect();
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        l_max: L_MAX,
        basis: basis.clone(),
        cutoff,
        oracle_seed,
        oracle_scale,
        records: records.len(),
        checksum: digest(&lines),
    };
    let mut text = serde_json::to_string(&header).expect("header serialises");
    text.push('\n');
    for l in &lines {
        text.push_str(l);
        text.push('\n');
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(header)
}

/// Read and fully validate a dataset file.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DatasetRecord>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub(crate) fn parse_dataset(text: &str) -> Result<(DatasetHeader, Vec<DatasetRecord>)> {
    let load = |record: usize, message: String| Error::Load { record, message };
    let mut lines = text.split_terminator('\n');
    let first = lines.next().ok_or_else(|| load(0, "empty file".into()))?;
    let header: DatasetHeader = serde_json::from_str(first).map_err(|e| load(0, format!("header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(load(0, format!("unknown format `{}`", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(load(
            0,
            format!("version {} not supported (expected {DATASET_VERSION})", header.version),
        ));
    }
    if header.l_max > L_MAX {
        return Err(load(0, format!("l_max {} exceeds the supported {L_MAX}", header.l_max)));
    }
    let body: Vec<String> = lines.map(str::to_string).collect();
    if !text.ends_with('\n') {
        return Err(load(body.len(), "file does not end with a newline (truncated?)".into()));
    }
    if body.len() != header.records {
        return Err(load(
            body.len(),
            format!("header announces {} records, found {}", header.records, body.len()),
        ));
    }
    if digest(&body) != header.checksum {
        return Err(load(0, "checksum mismatch".into()));
    }
    let mut records = Vec::with_capacity(body.len());
    for (k, line) in body.iter().enumerate() {
        let r = from_line(line, &header.basis).map_err(|e| load(k + 1, e.to_string()))?;
        if (r.system.cutoff - header.cutoff).abs() > 0.0 {
            return Err(load(k + 1, format!("cutoff {} differs from the header", r.system.cutoff)));
        }
        records.push(r);
    }
    Ok((header, records))
}
