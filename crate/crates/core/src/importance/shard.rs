//! Importance shard file: three little-endian u64 header words (neuron count,
//! sample count, domain id) followed by row-major f64 scores, one row per
//! sample.

use std::path::Path;

use serde::Serialize;

use super::{ImportanceRecord, ImportanceSummary};
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic, write_csv_with_header};
use crate::model::NeuronSpace;

const HEADER: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub domain: u64,
    pub neurons: usize,
    pub samples: usize,
    pub scores: Vec<f64>,
}

impl Shard {
    pub fn from_records(domain: u64, neurons: usize, records: &[ImportanceRecord]) -> Result<Self> {
        let mut scores = Vec::with_capacity(neurons * records.len());
        for r in records {
            if r.domain != domain || r.scores.len() != neurons {
                return Err(Error::Invalid(format!(
                    "record {} does not belong to a {neurons}-neuron shard of domain {domain}",
                    r.sample_id
                )));
            }
            scores.extend_from_slice(&r.scores);
        }
        Ok(Self {
            domain,
            neurons,
            samples: records.len(),
            scores,
        })
    }

    pub fn row(&self, sample: usize) -> &[f64] {
        &self.scores[sample * self.neurons..(sample + 1) * self.neurons]
    }

    /// All samples' scores for one neuron.
    pub fn column(&self, neuron: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.samples).map(move |s| self.scores[s * self.neurons + neuron])
    }

    pub fn records(&self) -> Vec<ImportanceRecord> {
        (0..self.samples)
            .map(|s| ImportanceRecord {
                sample_id: s as u64,
                domain: self.domain,
                scores: self.row(s).to_vec(),
            })
            .collect()
    }
}

pub fn write_shard(path: &Path, shard: &Shard) -> Result<()> {
    let mut out = Vec::with_capacity(HEADER + shard.scores.len() * 8);
    out.extend_from_slice(&(shard.neurons as u64).to_le_bytes());
    out.extend_from_slice(&(shard.samples as u64).to_le_bytes());
    out.extend_from_slice(&shard.domain.to_le_bytes());
    for v in &shard.scores {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn read_shard(path: &Path) -> Result<Shard> {
    let bytes = read_bytes(path)?;
    let corrupt = |detail: String| Error::Corrupt {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < HEADER {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
    let (neurons, samples, domain) = (word(0) as usize, word(1) as usize, word(2));
    let want = neurons
        .checked_mul(samples)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER))
        .ok_or_else(|| corrupt("header sizes overflow".into()))?;
    if bytes.len() != want {
        return Err(corrupt(format!(
            "expected {want} bytes for {samples} x {neurons} scores, found {}",
            bytes.len()
        )));
    }
    let scores: Vec<f64> = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(v) = scores.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(corrupt(format!("score {v} is not finite and non-negative")));
    }
    Ok(Shard {
        domain,
        neurons,
        samples,
        scores,
    })
}

#[derive(Serialize)]
struct SummaryRow {
    layer: usize,
    module: &'static str,
    index: usize,
    mean: f64,
    min: f64,
    max: f64,
    nonzero_fraction: f64,
}

/// One row per neuron: the domain mean plus the range over samples.
pub fn write_summary_csv(
    path: &Path,
    space: NeuronSpace,
    summary: &ImportanceSummary,
    shard: &Shard,
    header: &[(String, String)],
) -> Result<()> {
    let rows: Vec<SummaryRow> = space
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let (mut lo, mut hi, mut nz) = (f64::INFINITY, f64::NEG_INFINITY, 0usize);
            for v in shard.column(i) {
                lo = lo.min(v);
                hi = hi.max(v);
                nz += usize::from(v != 0.0);
            }
            SummaryRow {
                layer: id.layer,
                module: id.module.as_str(),
                index: id.index,
                mean: summary.mean[i],
                min: lo,
                max: hi,
                nonzero_fraction: nz as f64 / shard.samples.max(1) as f64,
            }
        })
        .collect();
    write_csv_with_header(path, header, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shard() -> Shard {
        Shard {
            domain: 2,
            neurons: 3,
            samples: 2,
            scores: vec![0.0, 1.5, 2.0, 3.0, 0.25, 1e-300],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.shard");
        write_shard(&p, &shard()).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 24 + 6 * 8);
        assert_eq!(read_shard(&p).unwrap(), shard());
        assert_eq!(shard().column(1).collect::<Vec<_>>(), vec![1.5, 0.25]);
    }

    #[test]
    fn truncated_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.shard");
        write_shard(&p, &shard()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_shard(&p), Err(Error::Corrupt { .. })));
    }
}
