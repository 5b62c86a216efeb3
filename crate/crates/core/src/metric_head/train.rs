//! AdamW training loops for the initial labeled step and the incremental
//! pseudo-labeled steps.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{pa_loss, quantize, AdamW, AdamWState, PaHyperparams, ProjectionHead, ProxyBank};
use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::pseudo_label::{PseudoLabeledSet, Provenance};
use crate::replay::{generate_replay_with, kd_loss_on_embeddings, Exemplar};
use crate::rng::{self, Stream};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub pa: f64,
    pub ex: f64,
    pub kd: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub head: ProjectionHead,
    pub bank: ProxyBank,
    pub log: Vec<EpochLog>,
    pub head_state: AdamWState,
    pub proxy_state: AdamWState,
}

/// Switches for the two forgetting countermeasures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IncrementalOptions {
    pub replay: bool,
    pub distill: bool,
}

impl Default for IncrementalOptions {
    fn default() -> Self {
        Self {
            replay: true,
            distill: true,
        }
    }
}

struct BatchGrads {
    pa: f64,
    ex: f64,
    kd: f64,
    grad_w: Array2<f64>,
    grad_p: Array2<f64>,
}

pub fn to_f64(ds: &EmbeddingDataset) -> Array2<f64> {
    ds.features().mapv(|v| v as f64)
}

fn gather(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Shared epoch/batch driver. `batch` computes losses and gradients for the
/// given sample indices.
fn optimize<F>(
    hp: &PaHyperparams,
    mut head: ProjectionHead,
    mut bank: ProxyBank,
    n: usize,
    shuffle: &mut ChaCha8Rng,
    mut batch: F,
) -> Result<TrainOutput>
where
    F: FnMut(&[usize], &ProjectionHead, &ProxyBank) -> Result<BatchGrads>,
{
    let opt = AdamW::default();
    let mut head_state = AdamWState::new(head.weight().len());
    let mut proxy_state = AdamWState::new(bank.proxies().len());
    let mut log = Vec::with_capacity(hp.epochs);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..hp.epochs {
        order.shuffle(shuffle);
        let scale = hp.lr_scale(epoch);
        let mut sums = [0.0f64; 3];
        let mut batches = 0usize;
        for idx in order.chunks(hp.batch_size) {
            let g = batch(idx, &head, &bank)?;
            sums[0] += g.pa;
            sums[1] += g.ex;
            sums[2] += g.kd;
            batches += 1;

            let w = head.weight_mut();
            opt.step(
                w.as_slice_mut().expect("standard layout"),
                g.grad_w.as_slice().expect("standard layout"),
                &mut head_state,
                hp.lr_model * scale,
                hp.weight_decay,
            )?;
            quantize(w);
            let p = bank.proxies_mut();
            opt.step(
                p.as_slice_mut().expect("standard layout"),
                g.grad_p.as_slice().expect("standard layout"),
                &mut proxy_state,
                hp.lr_proxy * scale,
                hp.weight_decay,
            )?;
            quantize(p);
        }
        let k = batches.max(1) as f64;
        let (pa, ex, kd) = (sums[0] / k, sums[1] / k, sums[2] / k);
        if !(pa + ex + kd).is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        log::debug!("epoch {epoch}: pa {pa:.5} ex {ex:.5} kd {kd:.5}");
        log.push(EpochLog {
            epoch,
            loss: pa + ex + kd,
            pa,
            ex,
            kd,
        });
    }
    Ok(TrainOutput {
        head,
        bank,
        log,
        head_state,
        proxy_state,
    })
}

/// Trains a fresh head and one proxy per labeled class.
pub fn train_initial(train: &EmbeddingDataset, hp: &PaHyperparams, seed: u64) -> Result<TrainOutput> {
    hp.validate()?;
    let labels = train.labels().ok_or(Error::MissingLabels)?;
    let classes = train.classes()?;
    if classes.len() < 2 {
        return Err(Error::InvalidData(format!(
            "initial step needs >= 2 classes, got {}",
            classes.len()
        )));
    }
    let mut init = rng::stream(seed, Stream::Init, 0);
    let head = ProjectionHead::random(train.dim(), hp.d_emb, &mut init);
    let bank = ProxyBank::random(classes, hp.d_emb, hp.proxy_init_std, &mut init)?;
    let x = to_f64(train);
    let mut shuffle = rng::stream(seed, Stream::Shuffle, 0);

    optimize(hp, head, bank, train.len(), &mut shuffle, |idx, head, bank| {
        let xb = gather(&x, idx);
        let projected = par::map_indexed(idx.len(), |i| head.project(xb.row(i)));
        let z = super::stack_rows(&projected.iter().map(|p| p.z.clone()).collect::<Vec<_>>(), head.d_emb());
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let out = pa_loss(&z, &yb, bank, hp.alpha, hp.delta)?;
        let mut grad_w = Array2::zeros(head.weight().raw_dim());
        head.backward(&xb, &projected, &out.grad_z, &mut grad_w);
        Ok(BatchGrads {
            pa: out.loss,
            ex: 0.0,
            kd: 0.0,
            grad_w,
            grad_p: out.grad_proxies,
        })
    })
}

/// Trains on a pseudo-labeled step with the grown bank.
///
/// Per batch the objective is the proxy-anchor loss on the batch, plus the same
/// loss on replayed old-class features (one per novel-labeled sample in the
/// batch), plus the distance between the frozen previous head's embeddings and
/// the current ones on old-labeled samples.
#[allow(clippy::too_many_arguments)]
pub fn train_incremental(
    head: &ProjectionHead,
    bank_grown: &ProxyBank,
    data: &PseudoLabeledSet,
    inputs: &EmbeddingDataset,
    exemplar: Option<&Exemplar>,
    prev_head: &ProjectionHead,
    hp: &PaHyperparams,
    opts: IncrementalOptions,
    seed: u64,
    step: u64,
) -> Result<TrainOutput> {
    hp.validate()?;
    if data.entries.is_empty() {
        return Err(Error::Empty("pseudo-labeled set"));
    }
    if prev_head.d_in() != head.d_in() || prev_head.d_emb() != head.d_emb() {
        return Err(Error::DimensionMismatch {
            expected: head.d_emb(),
            got: prev_head.d_emb(),
        });
    }
    for e in &data.entries {
        if e.index >= inputs.len() {
            return Err(Error::InvalidData(format!("pseudo-label index {} out of range", e.index)));
        }
        if bank_grown.row_of(e.label).is_none() {
            return Err(Error::UnknownLabel(e.label));
        }
    }
    let replay = if opts.replay { exemplar } else { None };

    let x_all = to_f64(inputs);
    let rows: Vec<usize> = data.entries.iter().map(|e| e.index).collect();
    let x = gather(&x_all, &rows);
    let prev_z = prev_head.embed_rows(&x)?;
    let mut shuffle = rng::stream(seed, Stream::Shuffle, step);
    let mut replay_rng = rng::stream(seed, Stream::Replay, step);
    let mut replay_cursor = 0usize;

    optimize(hp, head.clone(), bank_grown.clone(), rows.len(), &mut shuffle, |idx, head, bank| {
        let xb = gather(&x, idx);
        let projected = par::map_indexed(idx.len(), |i| head.project(xb.row(i)));
        let z = super::stack_rows(&projected.iter().map(|p| p.z.clone()).collect::<Vec<_>>(), head.d_emb());
        let yb: Vec<usize> = idx.iter().map(|&i| data.entries[i].label).collect();
        let out = pa_loss(&z, &yb, bank, hp.alpha, hp.delta)?;
        let mut grad_z = out.grad_z;
        let mut grad_p = out.grad_proxies;

        let mut ex = 0.0;
        let novel = idx
            .iter()
            .filter(|&&i| data.entries[i].provenance == Provenance::Cluster)
            .count();
        if let Some(exemplar) = replay {
            if novel > 0 {
                let (zr, yr) = generate_replay_with(exemplar, novel, &mut replay_rng, &mut replay_cursor);
                let r = pa_loss(&zr, &yr, bank, hp.alpha, hp.delta)?;
                ex = r.loss;
                grad_p += &r.grad_proxies;
            }
        }

        let mut kd = 0.0;
        if opts.distill {
            let old: Vec<usize> = (0..idx.len())
                .filter(|&k| data.entries[idx[k]].provenance == Provenance::OldPrediction)
                .collect();
            if !old.is_empty() {
                let cur = gather(&z, &old);
                let prev = gather(&prev_z, &old.iter().map(|&k| idx[k]).collect::<Vec<_>>());
                let (loss, g) = kd_loss_on_embeddings(&cur, &prev);
                kd = loss;
                for (r, &k) in old.iter().enumerate() {
                    let mut row = grad_z.row_mut(k);
                    row += &g.row(r);
                }
            }
        }

        let mut grad_w = Array2::zeros(head.weight().raw_dim());
        head.backward(&xb, &projected, &grad_z, &mut grad_w);
        Ok(BatchGrads {
            pa: out.loss,
            ex,
            kd,
            grad_w,
            grad_p,
        })
    })
}

/// Class id of the most similar proxy for each row of `x`; ties go to the
/// lowest class id.
pub fn nearest_proxy(head: &ProjectionHead, bank: &ProxyBank, x: &Array2<f64>) -> Result<Vec<usize>> {
    let z = head.embed_rows(x)?;
    Ok(nearest_proxy_embedded(bank, &z))
}

pub(crate) fn nearest_proxy_embedded(bank: &ProxyBank, z: &Array2<f64>) -> Vec<usize> {
    let ids = bank.class_ids();
    par::map_indexed(z.nrows(), |i| {
        let sims = bank.similarities(z.row(i));
        let mut best = 0;
        for j in 1..sims.len() {
            if sims[j] > sims[best] || (sims[j] == sims[best] && ids[j] < ids[best]) {
                best = j;
            }
        }
        ids[best]
    })
}
