//! Model checkpoints.
//!
//! ```text
//! "CGCK" | header_len u32 LE | header JSON | f32 LE tensors in header order
//! ```
//!
//! Parameters are kept on the f32 grid during training, so a checkpoint
//! restores them exactly.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::StepReport;
use crate::metric_head::{AdamWState, PaHyperparams, ProjectionHead, ProxyBank};
use crate::replay::Exemplar;

const MAGIC: &[u8; 4] = b"CGCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Last completed step.
    pub step_index: usize,
    pub head: ProjectionHead,
    pub bank: ProxyBank,
    pub exemplar: Exemplar,
    pub head_state: AdamWState,
    pub proxy_state: AdamWState,
    pub hyperparams: PaHyperparams,
    /// Reports of steps `0..=step_index`.
    pub reports: Vec<StepReport>,
    /// Run configuration that produced the checkpoint.
    pub config: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step_index: usize,
    d_in: usize,
    d_emb: usize,
    class_ids: Vec<usize>,
    exemplar_class_ids: Vec<usize>,
    head_adam_step: u64,
    proxy_adam_step: u64,
    hyperparams: PaHyperparams,
    reports: Vec<StepReport>,
    config: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

fn moments(s: &AdamWState) -> [Array2<f64>; 2] {
    let n = s.m.len();
    [
        Array2::from_shape_vec((1, n), s.m.clone()).expect("shape"),
        Array2::from_shape_vec((1, n), s.v.clone()).expect("shape"),
    ]
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let [hm, hv] = moments(&self.head_state);
        let [pm, pv] = moments(&self.proxy_state);
        let tensors: Vec<(&str, &Array2<f64>)> = vec![
            ("head.weight", self.head.weight()),
            ("bank.proxies", self.bank.proxies()),
            ("head.adam_m", &hm),
            ("head.adam_v", &hv),
            ("bank.adam_m", &pm),
            ("bank.adam_v", &pv),
            ("exemplar.mean", &self.exemplar.proxy_mean),
            ("exemplar.sigma", &self.exemplar.sigma),
        ];
        let header = Header {
            format_version: FORMAT_VERSION,
            step_index: self.step_index,
            d_in: self.head.d_in(),
            d_emb: self.head.d_emb(),
            class_ids: self.bank.class_ids().to_vec(),
            exemplar_class_ids: self.exemplar.class_ids.clone(),
            head_adam_step: self.head_state.step,
            proxy_adam_step: self.proxy_state.step,
            hyperparams: self.hyperparams.clone(),
            reports: self.reports.clone(),
            config: self.config.clone(),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorInfo {
                    name: name.to_string(),
                    shape: [t.nrows(), t.ncols()],
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(json.len()).map_err(|_| Error::InvalidData("checkpoint header too large".into()))?;
        let payload: usize = tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(8 + json.len() + 4 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated {
                expected: 8,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() < header_len {
            return Err(Error::Truncated {
                expected: 8 + header_len,
                found: bytes.len(),
            });
        }
        let header: Header = serde_json::from_slice(&body[..header_len])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(header.format_version.min(255) as u8));
        }

        let mut payload = &body[header_len..];
        let expected: usize = 8 + header_len + 4 * header.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum::<usize>();
        if bytes.len() != expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let mut tensors = std::collections::BTreeMap::new();
        for info in &header.tensors {
            let n = info.shape[0] * info.shape[1];
            let (chunk, rest) = payload.split_at(4 * n);
            payload = rest;
            let values: Vec<f64> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Array2::from_shape_vec((info.shape[0], info.shape[1]), values)
                .map_err(|e| Error::InvalidData(e.to_string()))?;
            tensors.insert(info.name.clone(), t);
        }
        let mut get = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::InvalidData(format!("checkpoint lacks tensor {name}")))
        };
        let weight = get("head.weight")?;
        let proxies = get("bank.proxies")?;
        let flat = |a: Array2<f64>| a.into_iter().collect::<Vec<f64>>();
        let head_state = AdamWState {
            m: flat(get("head.adam_m")?),
            v: flat(get("head.adam_v")?),
            step: header.head_adam_step,
        };
        let proxy_state = AdamWState {
            m: flat(get("bank.adam_m")?),
            v: flat(get("bank.adam_v")?),
            step: header.proxy_adam_step,
        };
        let exemplar = Exemplar {
            class_ids: header.exemplar_class_ids,
            proxy_mean: get("exemplar.mean")?,
            sigma: get("exemplar.sigma")?,
        };
        let head = ProjectionHead::new(weight)?;
        if head.d_in() != header.d_in || head.d_emb() != header.d_emb {
            return Err(Error::DimensionMismatch {
                expected: header.d_emb,
                got: head.d_emb(),
            });
        }
        Ok(Self {
            step_index: header.step_index,
            head,
            bank: ProxyBank::new(proxies, header.class_ids)?,
            exemplar,
            head_state,
            proxy_state,
            hyperparams: header.hyperparams,
            reports: header.reports,
            config: header.config,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
