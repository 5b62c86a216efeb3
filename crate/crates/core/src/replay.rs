//! Proxy-centered feature replay and embedding distillation.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::metric_head::{ProjectionHead, ProxyBank};
use crate::rng::{self, Stream};

/// Per-class Gaussian generator `N(proxy, diag(sigma^2))` in embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub class_ids: Vec<usize>,
    /// Unit-normalized trained proxies, one row per class.
    pub proxy_mean: Array2<f64>,
    /// Per-dimension standard deviations, one row per class.
    pub sigma: Array2<f64>,
}

impl Exemplar {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.proxy_mean.ncols()
    }

    pub fn sigma_of(&self, class: usize) -> Option<ArrayView1<'_, f64>> {
        self.class_ids.iter().position(|&c| c == class).map(|r| self.sigma.row(r))
    }
}

fn unit(v: ArrayView1<'_, f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v.to_owned() / n
    } else {
        v.to_owned()
    }
}

/// Sample standard deviation (n-1) per column; zero for a single row.
fn column_std(rows: &[ArrayView1<'_, f64>], d: usize) -> Array1<f64> {
    let n = rows.len();
    if n < 2 {
        return Array1::zeros(d);
    }
    let mut mean = Array1::<f64>::zeros(d);
    for r in rows {
        mean += r;
    }
    mean /= n as f64;
    let mut var = Array1::<f64>::zeros(d);
    for r in rows {
        let diff = r - &mean;
        var += &(&diff * &diff);
    }
    (var / (n - 1) as f64).mapv(f64::sqrt)
}

/// Builds the generator for every class in `bank` from labeled embeddings.
/// Classes with one sample fall back to the global per-dimension std.
pub fn build_exemplar(bank: &ProxyBank, embeddings: &Array2<f64>, labels: &[usize]) -> Result<Exemplar> {
    rebuild_exemplar(bank, embeddings, labels, None)
}

/// Like [`build_exemplar`], but a class with no samples in `labels` keeps its
/// sigma from `prev` (its mean always comes from the current bank).
pub fn rebuild_exemplar(
    bank: &ProxyBank,
    embeddings: &Array2<f64>,
    labels: &[usize],
    prev: Option<&Exemplar>,
) -> Result<Exemplar> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: embeddings.nrows(),
            got: labels.len(),
        });
    }
    if embeddings.ncols() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            got: embeddings.ncols(),
        });
    }
    let d = bank.dim();
    let mut by_class: BTreeMap<usize, Vec<ArrayView1<'_, f64>>> = BTreeMap::new();
    for (row, &l) in embeddings.rows().into_iter().zip(labels) {
        by_class.entry(l).or_default().push(row);
    }
    let global: Vec<ArrayView1<'_, f64>> = embeddings.rows().into_iter().collect();
    let global_std = column_std(&global, d);

    let c = bank.len();
    let mut proxy_mean = Array2::zeros((c, d));
    let mut sigma = Array2::zeros((c, d));
    for (r, &class) in bank.class_ids().iter().enumerate() {
        let s = match (by_class.get(&class), prev.and_then(|p| p.sigma_of(class))) {
            (Some(members), _) if members.len() > 1 => column_std(members, d),
            (Some(_), Some(old)) | (None, Some(old)) => old.to_owned(),
            (Some(_), None) => global_std.clone(),
            (None, None) => {
                return Err(Error::InvalidData(format!(
                    "class {class} has no embeddings for its exemplar"
                )))
            }
        };
        sigma.row_mut(r).assign(&s);
        proxy_mean.row_mut(r).assign(&unit(bank.proxies().row(r)));
    }
    crate::metric_head::quantize(&mut proxy_mean);
    crate::metric_head::quantize(&mut sigma);
    Ok(Exemplar {
        class_ids: bank.class_ids().to_vec(),
        proxy_mean,
        sigma,
    })
}

/// Draws `count` replay features, cycling through the classes in order.
pub fn generate_replay(ex: &Exemplar, count: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = rng::stream(seed, Stream::Replay, 0);
    let mut cursor = 0;
    generate_replay_with(ex, count, &mut rng, &mut cursor)
}

/// Like [`generate_replay`] but continues an existing stream and class cursor.
pub(crate) fn generate_replay_with(
    ex: &Exemplar,
    count: usize,
    rng: &mut impl Rng,
    cursor: &mut usize,
) -> (Array2<f64>, Vec<usize>) {
    let d = ex.dim();
    let mut z = Array2::zeros((count, d));
    let mut labels = Vec::with_capacity(count);
    if ex.is_empty() {
        return (Array2::zeros((0, d)), labels);
    }
    for i in 0..count {
        let c = *cursor % ex.len();
        *cursor += 1;
        let mean = ex.proxy_mean.row(c);
        let sigma = ex.sigma.row(c);
        for (j, v) in z.row_mut(i).iter_mut().enumerate() {
            let eta: f64 = rng.sample(StandardNormal);
            *v = mean[j] + sigma[j] * eta;
        }
        labels.push(ex.class_ids[c]);
    }
    (z, labels)
}

/// Mean L2 distance between paired rows and its gradient with respect to `cur`.
/// A pair at distance zero contributes zero gradient.
pub(crate) fn kd_loss_on_embeddings(cur: &Array2<f64>, prev: &Array2<f64>) -> (f64, Array2<f64>) {
    let k = cur.nrows();
    let mut grad = Array2::zeros(cur.raw_dim());
    if k == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for (i, (c, p)) in cur.rows().into_iter().zip(prev.rows()).enumerate() {
        let diff = &c - &p;
        let dist = diff.dot(&diff).sqrt();
        total += dist;
        if dist > 0.0 {
            grad.row_mut(i).assign(&(diff / (dist * k as f64)));
        }
    }
    (total / k as f64, grad)
}

/// Distillation loss `mean ||prev(x) - cur(x)||_2` over `old_inputs`, with its
/// gradient with respect to the current head's weight.
pub fn kd_loss(cur: &ProjectionHead, prev: &ProjectionHead, old_inputs: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if cur.d_in() != prev.d_in() || cur.d_emb() != prev.d_emb() {
        return Err(Error::DimensionMismatch {
            expected: cur.d_emb() * cur.d_in(),
            got: prev.d_emb() * prev.d_in(),
        });
    }
    let mut grad_w = Array2::zeros(cur.weight().raw_dim());
    if old_inputs.nrows() == 0 {
        return Ok((0.0, grad_w));
    }
    let projected: Vec<_> = old_inputs.rows().into_iter().map(|x| cur.project(x)).collect();
    let z = crate::metric_head::stack_rows(&projected.iter().map(|p| p.z.clone()).collect::<Vec<_>>(), cur.d_emb());
    let z_prev = prev.embed_rows(old_inputs)?;
    let (loss, grad_z) = kd_loss_on_embeddings(&z, &z_prev);
    cur.backward(old_inputs, &projected, &grad_z, &mut grad_w);
    Ok((loss, grad_w))
}
