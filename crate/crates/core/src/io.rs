//! Dataset files.
//!
//! CSV: the first line is the header `N,dim,C,seed,spec_hash`; every further
//! line is `label,true_noise_level,x_0,...,x_{dim-1}`. Floats are written in
//! shortest round-trip form, so reading back is exact.
//!
//! Binary, little-endian:
//!
//! ```text
//! magic        8 bytes  "DULDATA\0"
//! N            u64
//! dim          u32
//! C            u32
//! seed         u64
//! spec_hash    16 ASCII hex bytes
//! records      N * (u32 label, f64 noise, dim * f64)
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Reader;
use crate::error::{DulError, Result};
use crate::linalg::Matrix;
use crate::synth::{GeneratorSpec, SyntheticIdentityDataset};

pub const DATA_MAGIC: &[u8; 8] = b"DULDATA\0";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub n: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub spec_hash: String,
}

/// Sample records as stored on disk, before being tied back to a spec.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecords {
    pub header: DatasetHeader,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub noise_levels: Vec<f64>,
}

impl DatasetRecords {
    /// Reattaches the generator spec; its hash must match the header.
    pub fn into_dataset(self, spec: GeneratorSpec) -> Result<SyntheticIdentityDataset> {
        let hash = spec.hash();
        if hash != self.header.spec_hash {
            return Err(DulError::Format(format!(
                "spec hash {hash} does not match file hash {}",
                self.header.spec_hash
            )));
        }
        Ok(SyntheticIdentityDataset {
            spec,
            num_classes: self.header.num_classes,
            inputs: self.inputs,
            labels: self.labels,
            noise_levels: self.noise_levels,
        })
    }
}

pub fn header_of(ds: &SyntheticIdentityDataset) -> DatasetHeader {
    DatasetHeader {
        n: ds.len(),
        dim: ds.input_dim(),
        num_classes: ds.num_classes,
        seed: ds.spec.identities.seed,
        spec_hash: ds.spec.hash(),
    }
}

pub fn to_csv(ds: &SyntheticIdentityDataset) -> String {
    let h = header_of(ds);
    let mut out = String::new();
    let _ = writeln!(out, "{},{},{},{},{}", h.n, h.dim, h.num_classes, h.seed, h.spec_hash);
    for i in 0..ds.len() {
        let _ = write!(out, "{},{:?}", ds.labels[i], ds.noise_levels[i]);
        for x in ds.inputs.row(i) {
            let _ = write!(out, ",{x:?}");
        }
        out.push('\n');
    }
    out
}

fn parse<T: std::str::FromStr>(field: &str, what: &str, line: usize) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| DulError::Format(format!("line {line}: bad {what} {field:?}")))
}

pub fn from_csv(text: &str) -> Result<DatasetRecords> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines
        .next()
        .ok_or_else(|| DulError::Format("empty dataset file".into()))?;
    let f: Vec<&str> = head.split(',').collect();
    if f.len() != 5 {
        return Err(DulError::Format(format!("header needs 5 fields, got {}", f.len())));
    }
    let header = DatasetHeader {
        n: parse(f[0], "N", 1)?,
        dim: parse(f[1], "dim", 1)?,
        num_classes: parse(f[2], "C", 1)?,
        seed: parse(f[3], "seed", 1)?,
        spec_hash: f[4].trim().to_string(),
    };
    let mut data = Vec::with_capacity(header.n * header.dim);
    let mut labels = Vec::with_capacity(header.n);
    let mut noise = Vec::with_capacity(header.n);
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.dim + 2 {
            return Err(DulError::Format(format!(
                "line {lineno}: expected {} fields, got {}",
                header.dim + 2,
                fields.len()
            )));
        }
        labels.push(parse(fields[0], "label", lineno)?);
        noise.push(parse(fields[1], "noise level", lineno)?);
        for x in &fields[2..] {
            data.push(parse(x, "feature", lineno)?);
        }
    }
    finish(header, data, labels, noise)
}

pub fn to_binary(ds: &SyntheticIdentityDataset) -> Result<Vec<u8>> {
    let h = header_of(ds);
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| DulError::Format(format!("{what} {v} does not fit in u32")))
    };
    let mut out = Vec::with_capacity(48 + ds.len() * (12 + 8 * h.dim));
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&(h.n as u64).to_le_bytes());
    out.extend_from_slice(&to_u32(h.dim, "dim")?.to_le_bytes());
    out.extend_from_slice(&to_u32(h.num_classes, "num_classes")?.to_le_bytes());
    out.extend_from_slice(&h.seed.to_le_bytes());
    out.extend_from_slice(h.spec_hash.as_bytes());
    for i in 0..ds.len() {
        out.extend_from_slice(&to_u32(ds.labels[i], "label")?.to_le_bytes());
        out.extend_from_slice(&ds.noise_levels[i].to_le_bytes());
        for x in ds.inputs.row(i) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_binary(bytes: &[u8]) -> Result<DatasetRecords> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != DATA_MAGIC {
        return Err(DulError::Format("not a dataset file (bad magic)".into()));
    }
    let n = r.u64()? as usize;
    let dim = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let seed = r.u64()?;
    let spec_hash = std::str::from_utf8(r.take(16)?)
        .map_err(|_| DulError::Format("spec hash is not ASCII".into()))?
        .to_string();
    let record = 12 + 8 * dim;
    if bytes.len() - r.pos != n * record {
        return Err(DulError::Format(format!(
            "expected {} record bytes, found {}",
            n * record,
            bytes.len() - r.pos
        )));
    }
    let mut data = vec![0.0; n * dim];
    let mut labels = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    for i in 0..n {
        labels.push(r.u32()? as usize);
        noise.push(r.f64()?);
        r.fill_f64s(&mut data[i * dim..(i + 1) * dim])?;
    }
    let header = DatasetHeader {
        n,
        dim,
        num_classes,
        seed,
        spec_hash,
    };
    finish(header, data, labels, noise)
}

fn finish(header: DatasetHeader, data: Vec<f64>, labels: Vec<usize>, noise: Vec<f64>) -> Result<DatasetRecords> {
    if labels.len() != header.n {
        return Err(DulError::Format(format!(
            "header says {} samples, file has {}",
            header.n,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= header.num_classes) {
        return Err(DulError::LabelOutOfRange {
            label: bad,
            num_classes: header.num_classes,
        });
    }
    Ok(DatasetRecords {
        inputs: Matrix::from_vec(header.n, header.dim, data),
        header,
        labels,
        noise_levels: noise,
    })
}
