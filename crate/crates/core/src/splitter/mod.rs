//! Old/novel separation of an unlabeled joint set.
//!
//! The initial split thresholds each sample's best proxy similarity. The fine
//! split fits a two-component GMM to those scores, keeps only confidently
//! assigned ("clean") samples, and trains a small classifier on them. Before
//! each later epoch the classifier's own old-probabilities are refit with a
//! GMM and the clean sets reselected.

mod gmm;
mod net;

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric_head::ProxyBank;
use crate::par;
use crate::rng::{self, Stream};

pub use gmm::{fit_gmm1d, Gmm1D};
pub use net::SplitNetParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDecision {
    pub sample_id: u64,
    /// Highest cosine similarity to any old proxy.
    pub initial_score: f64,
    /// 0 = old, 1 = new.
    pub initial_label: u8,
    /// Classifier probability of "new".
    pub fine_prob: f64,
    /// Posterior of the old-like (high-score) GMM component on the initial scores.
    pub gmm_posterior: f64,
    pub final_label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub epsilon: f64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// GMM posterior needed to count as clean.
    pub clean_threshold: f64,
    pub gmm_iters: usize,
    pub gmm_tol: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            epochs: 3,
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 64,
            clean_threshold: 0.95,
            gmm_iters: 100,
            gmm_tol: 1e-6,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clean_threshold > 0.5 && self.clean_threshold < 1.0) {
            return Err(Error::Config(format!(
                "clean_threshold must be in (0.5,1), got {}",
                self.clean_threshold
            )));
        }
        if !(self.lr > 0.0) || self.batch_size < 2 || self.gmm_iters == 0 {
            return Err(Error::Config("split lr must be positive, batch_size >= 2, gmm_iters >= 1".into()));
        }
        Ok(())
    }
}

/// Old iff the best proxy similarity is at least `epsilon`.
pub fn initial_split(embeddings: &Array2<f64>, ids: &[u64], bank: &ProxyBank, epsilon: f64) -> Result<Vec<SplitDecision>> {
    if embeddings.nrows() == 0 {
        return Err(Error::Empty("split input"));
    }
    if bank.is_empty() {
        return Err(Error::Empty("proxy bank"));
    }
    if embeddings.ncols() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            got: embeddings.ncols(),
        });
    }
    let scores = par::map_indexed(embeddings.nrows(), |i| {
        bank.similarities(embeddings.row(i))
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    });
    Ok(scores
        .into_iter()
        .zip(ids)
        .map(|(s, &id)| {
            let label = u8::from(s < epsilon);
            SplitDecision {
                sample_id: id,
                initial_score: s,
                initial_label: label,
                fine_prob: f64::from(label),
                gmm_posterior: f64::from(1 - label),
                final_label: label,
            }
        })
        .collect())
}

/// Indices whose posterior for the high-mean (old-like) component is at least
/// `threshold` (clean old) or at most `1 - threshold` (clean new).
pub fn select_clean_with(scores: &[f64], gmm: &Gmm1D, threshold: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut old = Vec::new();
    let mut new = Vec::new();
    for (i, &s) in scores.iter().enumerate() {
        let p = gmm.posterior_high(s);
        if p >= threshold {
            old.push(i);
        } else if p <= 1.0 - threshold {
            new.push(i);
        }
    }
    if old.is_empty() {
        return Err(Error::NoCleanSamples("old"));
    }
    if new.is_empty() {
        return Err(Error::NoCleanSamples("new"));
    }
    Ok((old, new))
}

pub fn select_clean(scores: &[f64], gmm: &Gmm1D) -> Result<(Vec<usize>, Vec<usize>)> {
    select_clean_with(scores, gmm, 0.95)
}

/// Per-epoch record of the fine-split iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEpoch {
    pub clean_old: usize,
    pub clean_new: usize,
    pub loss: f64,
}

/// Trains the split network. Epoch 1 uses the given clean sets; before every
/// later epoch the network's old-probabilities `1 - m(z)` on all embeddings
/// are refit with a GMM and the clean sets reselected. If a refit fails the
/// previous clean sets are kept. Batch-norm statistics are recomputed on the
/// epoch's clean samples after each epoch.
pub fn train_split_net(
    clean_old: &[usize],
    clean_new: &[usize],
    embeddings: &Array2<f64>,
    cfg: &SplitConfig,
    seed: u64,
    step: u64,
) -> Result<(SplitNetParams, Vec<SplitEpoch>)> {
    cfg.validate()?;
    if clean_old.is_empty() {
        return Err(Error::NoCleanSamples("old"));
    }
    if clean_new.is_empty() {
        return Err(Error::NoCleanSamples("new"));
    }
    let mut rng = rng::stream(seed, Stream::Split, step);
    let mut net = SplitNetParams::new(embeddings.ncols(), &mut rng);
    let mut optim = net.optimizer();
    let mut old = clean_old.to_vec();
    let mut new = clean_new.to_vec();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            let p_old: Vec<f64> = net.predict(embeddings).into_iter().map(|p| 1.0 - p).collect();
            match fit_gmm1d(&p_old, cfg.gmm_iters, cfg.gmm_tol)
                .and_then(|g| select_clean_with(&p_old, &g, cfg.clean_threshold))
            {
                Ok((o, n)) => {
                    old = o;
                    new = n;
                }
                Err(e) => log::warn!("fine split epoch {epoch}: keeping previous clean sets ({e})"),
            }
        }
        let mut samples: Vec<(usize, f64)> = old.iter().map(|&i| (i, 0.0)).chain(new.iter().map(|&i| (i, 1.0))).collect();
        samples.shuffle(&mut rng);
        let mut batches: Vec<&[(usize, f64)]> = samples.chunks(cfg.batch_size).collect();
        // Batch norm needs two rows; fold a trailing singleton into its neighbour.
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            batches.pop();
            let k = batches.len() - 1;
            batches[k] = &samples[k * cfg.batch_size..];
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in batches {
            if batch.len() < 2 {
                continue;
            }
            let idx: Vec<usize> = batch.iter().map(|(i, _)| *i).collect();
            let y: Vec<f64> = batch.iter().map(|(_, t)| *t).collect();
            let x = embeddings.select(Axis(0), &idx);
            total += net.train_batch(&x, &y, &mut optim, cfg.lr, cfg.weight_decay)?;
            count += 1;
        }
        let seen: Vec<usize> = samples.iter().map(|(i, _)| *i).collect();
        net.recalibrate(&embeddings.select(Axis(0), &seen));
        history.push(SplitEpoch {
            clean_old: old.len(),
            clean_new: new.len(),
            loss: total / count.max(1) as f64,
        });
    }
    if !net.is_finite() {
        return Err(Error::NonFinite("split network"));
    }
    Ok((net, history))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineSplit {
    pub decisions: Vec<SplitDecision>,
    pub history: Vec<SplitEpoch>,
    /// Set when the fine stage was skipped and initial labels were kept.
    pub fallback: Option<String>,
}

/// Initial split, GMM clean selection, split-network training, and final
/// labels `m(z) >= 0.5`. Any failure along the fine path falls back to the
/// initial labels, as does a mixture whose components are not clearly
/// bimodal.
pub fn fine_split(
    embeddings: &Array2<f64>,
    ids: &[u64],
    bank: &ProxyBank,
    cfg: &SplitConfig,
    seed: u64,
    step: u64,
) -> Result<FineSplit> {
    let mut decisions = initial_split(embeddings, ids, bank, cfg.epsilon)?;
    let scores: Vec<f64> = decisions.iter().map(|d| d.initial_score).collect();

    let fallback = |decisions: Vec<SplitDecision>, why: String| {
        log::warn!("fine split fell back to the initial split: {why}");
        FineSplit {
            decisions,
            history: Vec::new(),
            fallback: Some(why),
        }
    };

    let gmm = match fit_gmm1d(&scores, cfg.gmm_iters, cfg.gmm_tol) {
        Ok(g) => g,
        Err(e) => return Ok(fallback(decisions, e.to_string())),
    };
    for (d, &s) in decisions.iter_mut().zip(&scores) {
        d.gmm_posterior = gmm.posterior_high(s);
    }
    if cfg.epochs == 0 {
        return Ok(fallback(decisions, "split network has zero epochs".into()));
    }
    // Ashman's D: below 2 the two components overlap into one population.
    let d = gmm.separation();
    if d <= 2.0 {
        return Ok(fallback(decisions, format!("score modes are not separated (D = {d:.3})")));
    }
    let (old, new) = match select_clean_with(&scores, &gmm, cfg.clean_threshold) {
        Ok(sets) => sets,
        Err(e) => return Ok(fallback(decisions, e.to_string())),
    };
    let (net, history) = match train_split_net(&old, &new, embeddings, cfg, seed, step) {
        Ok(r) => r,
        Err(e) => return Ok(fallback(decisions, e.to_string())),
    };
    for (d, p) in decisions.iter_mut().zip(net.predict(embeddings)) {
        d.fine_prob = p;
        d.final_label = u8::from(p >= 0.5);
    }
    Ok(FineSplit {
        decisions,
        history,
        fallback: None,
    })
}

/// Writes the per-sample score trail. `truth` (1 = novel) is only supplied by
/// the evaluation harness.
pub fn write_histogram_csv(decisions: &[SplitDecision], truth: Option<&[u8]>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, histogram_csv(decisions, truth)?)?;
    Ok(())
}

pub fn histogram_csv(decisions: &[SplitDecision], truth: Option<&[u8]>) -> Result<String> {
    if let Some(t) = truth {
        if t.len() != decisions.len() {
            return Err(Error::DimensionMismatch {
                expected: decisions.len(),
                got: t.len(),
            });
        }
    }
    let mut out = String::from("sample_id,initial_score,fine_prob,gmm_posterior,initial_label,final_label");
    if truth.is_some() {
        out.push_str(",hidden_truth");
    }
    out.push('\n');
    for (i, d) in decisions.iter().enumerate() {
        write!(
            out,
            "{},{},{},{},{},{}",
            d.sample_id, d.initial_score, d.fine_prob, d.gmm_posterior, d.initial_label, d.final_label
        )
        .expect("string write");
        if let Some(t) = truth {
            write!(out, ",{}", t[i]).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn initial_split_examples() {
        let bank = ProxyBank::new(array![[1.0, 0.0]], vec![0]).unwrap();
        let z = array![[2.0, 0.0], [-1.0, 0.0], [0.0, 1.0]];
        let d = initial_split(&z, &[0, 1, 2], &bank, 0.0).unwrap();
        assert_eq!(d[0].initial_label, 0);
        assert_eq!(d[0].initial_score, 1.0);
        assert_eq!(d[1].initial_label, 1);
        assert_eq!(d[1].initial_score, -1.0);
        // Score 0 meets the threshold.
        assert_eq!(d[2].initial_label, 0);
        assert!(initial_split(&Array2::zeros((0, 2)), &[], &bank, 0.0).is_err());
    }

    #[test]
    fn initial_split_scale_invariant() {
        let bank = ProxyBank::new(array![[1.0, 0.5], [-0.3, 0.8]], vec![0, 1]).unwrap();
        let bank2 = ProxyBank::new(bank.proxies() * 3.0, vec![0, 1]).unwrap();
        let z = array![[0.2, -0.9], [0.7, 0.1], [-0.5, -0.5]];
        let a = initial_split(&z, &[0, 1, 2], &bank, 0.0).unwrap();
        let b = initial_split(&(&z * 0.25), &[0, 1, 2], &bank2, 0.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.initial_label, y.initial_label);
            assert!((x.initial_score - y.initial_score).abs() < 1e-12);
        }
    }

    fn flat_gmm() -> Gmm1D {
        Gmm1D {
            weights: [0.5, 0.5],
            means: [0.0, 0.0],
            variances: [1.0, 1.0],
            log_likelihood: vec![],
            converged: true,
        }
    }

    #[test]
    fn inseparable_scores_have_no_clean_sets() {
        let scores = [0.1, 0.2, 0.3, 0.4];
        assert!(flat_gmm().posterior_high(0.3) == 0.5);
        assert!(matches!(select_clean(&scores, &flat_gmm()), Err(Error::NoCleanSamples(_))));
    }

    #[test]
    fn bimodal_clean_sets_are_the_modes() {
        let mut scores = Vec::new();
        for i in 0..20 {
            scores.push(-0.6 + 0.001 * i as f64);
            scores.push(0.6 + 0.001 * i as f64);
        }
        let g = fit_gmm1d(&scores, 100, 1e-6).unwrap();
        let (old, new) = select_clean(&scores, &g).unwrap();
        let expect_old: Vec<usize> = (0..40).filter(|i| i % 2 == 1).collect();
        let expect_new: Vec<usize> = (0..40).filter(|i| i % 2 == 0).collect();
        assert_eq!(old, expect_old);
        assert_eq!(new, expect_new);
    }

    #[test]
    fn clean_sets_shrink_with_threshold() {
        let scores: Vec<f64> = (0..60).map(|i| ((i * 37) % 60) as f64 / 30.0 - 1.0).collect();
        let g = fit_gmm1d(&scores, 100, 1e-6).unwrap();
        let mut prev: Option<(Vec<usize>, Vec<usize>)> = None;
        for t in [0.6, 0.7, 0.8, 0.9, 0.95, 0.99] {
            let Ok((o, n)) = select_clean_with(&scores, &g, t) else { break };
            assert!(o.iter().all(|i| !n.contains(i)));
            if let Some((po, pn)) = &prev {
                assert!(o.iter().all(|i| po.contains(i)));
                assert!(n.iter().all(|i| pn.contains(i)));
            }
            prev = Some((o, n));
        }
    }

    #[test]
    fn zero_epochs_falls_back() {
        let bank = ProxyBank::new(array![[1.0, 0.0]], vec![0]).unwrap();
        let z = Array2::from_shape_fn((20, 2), |(i, j)| if j == 0 { if i < 10 { 1.0 } else { -1.0 } } else { 0.1 * i as f64 });
        let ids: Vec<u64> = (0..20).collect();
        let cfg = SplitConfig {
            epochs: 0,
            ..SplitConfig::default()
        };
        let out = fine_split(&z, &ids, &bank, &cfg, 0, 1).unwrap();
        assert!(out.fallback.is_some());
        for d in &out.decisions {
            assert_eq!(d.final_label, d.initial_label);
        }
    }

    #[test]
    fn csv_schema() {
        let bank = ProxyBank::new(array![[1.0, 0.0]], vec![0]).unwrap();
        let z = array![[1.0, 0.0], [-1.0, 0.0]];
        let d = initial_split(&z, &[5, 6], &bank, 0.0).unwrap();
        let csv = histogram_csv(&d, Some(&[0, 1])).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "sample_id,initial_score,fine_prob,gmm_posterior,initial_label,final_label,hidden_truth");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2], "6,-1,1,0,1,1,1");
        assert!(histogram_csv(&d, Some(&[0])).is_err());
    }
}
