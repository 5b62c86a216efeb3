//! Projection head, proxy bank and the proxy-anchor training objective.

mod adamw;
mod loss;
mod train;

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

pub use adamw::{AdamW, AdamWState};
pub use loss::{pa_loss, PaLoss};
pub use train::{
    nearest_proxy, to_f64, train_initial, train_incremental, EpochLog, IncrementalOptions, TrainOutput,
};

/// Rounds every entry to the nearest `f32`. Parameters live on the f32 grid
/// so checkpoints written as f32 restore them exactly.
pub(crate) fn quantize(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v as f32 as f64);
}

/// Linear map from input features to the embedding space, followed by L2
/// normalization. No bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    weight: Array2<f64>,
}

/// Forward pass of one input, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Projected {
    pub z: Array1<f64>,
    pub norm: f64,
}

impl ProjectionHead {
    /// `weight` is `d_emb x d_in`.
    pub fn new(weight: Array2<f64>) -> Result<Self> {
        if weight.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projection weight"));
        }
        if weight.is_empty() {
            return Err(Error::Empty("projection weight"));
        }
        Ok(Self { weight })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            weight: Array2::eye(d),
        }
    }

    /// Gaussian init with standard deviation `1/sqrt(d_in)`.
    pub fn random(d_in: usize, d_emb: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("valid std");
        let mut weight = Array2::from_shape_fn((d_emb, d_in), |_| normal.sample(rng));
        quantize(&mut weight);
        Self { weight }
    }

    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_emb(&self) -> usize {
        self.weight.nrows()
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub(crate) fn weight_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weight
    }

    pub(crate) fn project(&self, x: ArrayView1<'_, f64>) -> Projected {
        let u = self.weight.dot(&x);
        let norm = u.dot(&u).sqrt();
        let z = if norm > 0.0 {
            u / norm
        } else {
            canonical(self.d_emb())
        };
        Projected { z, norm }
    }

    /// Unit-norm embedding of `x`. A zero projection maps to `e_0`.
    pub fn embed(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.d_in() {
            return Err(Error::DimensionMismatch {
                expected: self.d_in(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("head input"));
        }
        Ok(self.project(x).z)
    }

    /// Embeds every row of `x`.
    pub fn embed_rows(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.d_in() {
            return Err(Error::DimensionMismatch {
                expected: self.d_in(),
                got: x.ncols(),
            });
        }
        let rows = par::map_indexed(x.nrows(), |i| self.project(x.row(i)).z);
        Ok(stack_rows(&rows, self.d_emb()))
    }

    /// Chain rule through `z = Wx / |Wx|`: accumulates into `grad_w` the weight
    /// gradient for upstream gradients `grad_z` (one row per input).
    pub(crate) fn backward(
        &self,
        inputs: &Array2<f64>,
        projected: &[Projected],
        grad_z: &Array2<f64>,
        grad_w: &mut Array2<f64>,
    ) {
        let grad_u: Vec<Array1<f64>> = par::map_indexed(projected.len(), |i| {
            let p = &projected[i];
            if p.norm == 0.0 {
                return Array1::zeros(self.d_emb());
            }
            let g = grad_z.row(i);
            let radial = p.z.dot(&g);
            (&g - &(&p.z * radial)) / p.norm
        });
        let d_in = self.d_in();
        let cols = grad_w.ncols();
        debug_assert_eq!(cols, d_in);
        let slice = grad_w.as_slice_mut().expect("standard layout");
        par::for_each_chunk_mut(slice, d_in, |r, row| {
            for (gu, x) in grad_u.iter().zip(inputs.rows()) {
                let c = gu[r];
                if c != 0.0 {
                    row.iter_mut().zip(x.iter()).for_each(|(w, xv)| *w += c * xv);
                }
            }
        });
    }
}

fn canonical(d: usize) -> Array1<f64> {
    let mut e = Array1::zeros(d);
    e[0] = 1.0;
    e
}

pub(crate) fn stack_rows(rows: &[Array1<f64>], d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), d));
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(src);
    }
    out
}

/// Cosine similarity; errors on a zero vector.
pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidData("cosine similarity of a zero vector".into()));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// One learnable anchor per known class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyBank {
    proxies: Array2<f64>,
    class_ids: Vec<usize>,
    index: HashMap<usize, usize>,
}

impl ProxyBank {
    pub fn new(proxies: Array2<f64>, class_ids: Vec<usize>) -> Result<Self> {
        if proxies.nrows() == 0 {
            return Err(Error::Empty("proxy bank"));
        }
        if proxies.nrows() != class_ids.len() {
            return Err(Error::DimensionMismatch {
                expected: proxies.nrows(),
                got: class_ids.len(),
            });
        }
        if proxies.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("proxies"));
        }
        let mut index = HashMap::with_capacity(class_ids.len());
        for (row, &c) in class_ids.iter().enumerate() {
            if index.insert(c, row).is_some() {
                return Err(Error::InvalidData(format!("duplicate proxy class {c}")));
            }
        }
        Ok(Self {
            proxies,
            class_ids,
            index,
        })
    }

    /// `N(0, std^2)` proxies for `class_ids`.
    pub fn random(class_ids: Vec<usize>, d_emb: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut proxies = Array2::from_shape_fn((class_ids.len(), d_emb), |_| normal.sample(rng));
        quantize(&mut proxies);
        Self::new(proxies, class_ids)
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.proxies.ncols()
    }

    pub fn proxies(&self) -> &Array2<f64> {
        &self.proxies
    }

    pub(crate) fn proxies_mut(&mut self) -> &mut Array2<f64> {
        &mut self.proxies
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    /// Row of the proxy for `class`.
    pub fn row_of(&self, class: usize) -> Option<usize> {
        self.index.get(&class).copied()
    }

    /// Next unused class id.
    pub fn next_class_id(&self) -> usize {
        self.class_ids.iter().max().map_or(0, |m| m + 1)
    }

    /// Cosine similarity of `z` to every proxy.
    pub fn similarities(&self, z: ArrayView1<'_, f64>) -> Vec<f64> {
        let nz = z.dot(&z).sqrt();
        self.proxies
            .rows()
            .into_iter()
            .map(|p| {
                let np = p.dot(&p).sqrt();
                if nz == 0.0 || np == 0.0 {
                    0.0
                } else {
                    (p.dot(&z) / (nz * np)).clamp(-1.0, 1.0)
                }
            })
            .collect()
    }

    /// Appends rows for new classes. Existing rows are untouched.
    pub fn with_appended(&self, rows: &Array2<f64>, class_ids: &[usize]) -> Result<Self> {
        if rows.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: rows.ncols(),
            });
        }
        let mut proxies = self.proxies.clone();
        proxies
            .append(Axis(0), rows.view())
            .map_err(|e| Error::InvalidData(e.to_string()))?;
        let mut ids = self.class_ids.clone();
        ids.extend_from_slice(class_ids);
        Self::new(proxies, ids)
    }
}

/// Proxy-anchor hyperparameters and the optimizer schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PaHyperparams {
    pub alpha: f64,
    pub delta: f64,
    pub d_emb: usize,
    pub lr_model: f64,
    pub lr_proxy: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Multiply learning rates by `lr_decay` every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    /// Standard deviation of the initial proxies.
    pub proxy_init_std: f64,
}

impl Default for PaHyperparams {
    fn default() -> Self {
        Self {
            alpha: 32.0,
            delta: 0.1,
            d_emb: 128,
            lr_model: 1e-4,
            lr_proxy: 1e-2,
            weight_decay: 1e-4,
            epochs: 60,
            lr_decay: 0.5,
            lr_decay_every: 5,
            batch_size: 120,
            proxy_init_std: 0.01,
        }
    }
}

impl PaHyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("delta", self.delta),
            ("lr_model", self.lr_model),
            ("lr_proxy", self.lr_proxy),
            ("lr_decay", self.lr_decay),
            ("proxy_init_std", self.proxy_init_std),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.d_emb == 0 || self.lr_decay_every == 0 {
            return Err(Error::Config("batch_size, d_emb and lr_decay_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning-rate multiplier for `epoch` (0-based).
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}
