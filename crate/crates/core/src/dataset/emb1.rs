//! EMB1 binary feature files and the JSON manifest that indexes them.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EMB1" | version u8 = 1 | flags u8 (bit0: labels) | reserved u16 = 0
//! | N u32 | d u32 | N*d f32 row-major | [N i32 labels]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::EmbeddingDataset;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EMB1";
const VERSION: u8 = 1;
const FLAG_LABELS: u8 = 1;
const HEADER_LEN: usize = 16;

pub fn write_emb1(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(ds)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_emb1(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    decode(&fs::read(path)?)
}

pub(crate) fn encode(ds: &EmbeddingDataset) -> Result<Vec<u8>> {
    let n = u32::try_from(ds.len()).map_err(|_| Error::SizeOverflow {
        n: ds.len() as u64,
        d: ds.dim() as u64,
    })?;
    let d = u32::try_from(ds.dim()).map_err(|_| Error::SizeOverflow {
        n: ds.len() as u64,
        d: ds.dim() as u64,
    })?;
    let labels = ds.labels();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * ds.len() * (ds.dim() + 1));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(if labels.is_some() { FLAG_LABELS } else { 0 });
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for v in ds.features().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = labels {
        for &l in labels {
            let l = i32::try_from(l).map_err(|_| Error::InvalidData(format!("label {l} exceeds i32")))?;
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<EmbeddingDataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let has_labels = bytes[5] & FLAG_LABELS != 0;
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as u64;

    let overflow = || Error::SizeOverflow { n, d };
    let cells = n.checked_mul(d).ok_or_else(overflow)?;
    let per_label = if has_labels { 4 } else { 0 };
    let expected = cells
        .checked_mul(4)
        .and_then(|b| b.checked_add(n * per_label))
        .and_then(|b| b.checked_add(HEADER_LEN as u64))
        .and_then(|b| usize::try_from(b).ok())
        .ok_or_else(overflow)?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::InvalidData(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }

    let (n, d, cells) = (n as usize, d as usize, cells as usize);
    let payload = &bytes[HEADER_LEN..HEADER_LEN + 4 * cells];
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let features = Array2::from_shape_vec((n, d), values).map_err(|e| Error::InvalidData(e.to_string()))?;

    let labels = if has_labels {
        let raw = &bytes[HEADER_LEN + 4 * cells..];
        let labels = raw
            .chunks_exact(4)
            .map(|c| {
                let l = i32::from_le_bytes(c.try_into().unwrap());
                usize::try_from(l).map_err(|_| Error::InvalidData(format!("negative label {l}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(labels)
    } else {
        None
    };
    EmbeddingDataset::with_sequential_ids(features, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Train,
    Validation,
    HiddenTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub role: Role,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step: Option<usize>,
}

/// Index of the files making up a dataset or scenario.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
    /// Original label (as written by the producer) to dense class index.
    pub class_map: BTreeMap<String, usize>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }
}
