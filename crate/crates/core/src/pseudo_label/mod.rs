//! Pseudo-labels for the split unlabeled set: previous-model predictions for
//! the old side, affinity-propagation clusters for the novel side.

mod affinity;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric_head::{nearest_proxy, ProjectionHead, ProxyBank};

pub use affinity::{
    affinity_propagation, affinity_propagation_similarity, neg_sq_euclidean, ApConfig, ApResult, Preference,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    OldPrediction,
    Cluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    /// Row in the step's training set.
    pub index: usize,
    pub sample_id: u64,
    pub label: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledSet {
    pub entries: Vec<PseudoLabel>,
    pub novel_class_count: usize,
    /// Unit-norm cluster means, one row per novel class.
    pub cluster_centroids: Array2<f64>,
}

/// Result of clustering the novel side.
#[derive(Debug, Clone, PartialEq)]
pub struct NovelClusters {
    pub entries: Vec<PseudoLabel>,
    pub novel_class_count: usize,
    pub centroids: Array2<f64>,
    /// Row indices (into the step's training set) of the exemplar points.
    pub exemplar_rows: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

/// JSON summary of a clustering run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub novel_class_count: usize,
    pub exemplar_sample_ids: Vec<u64>,
    pub cluster_sizes: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

impl NovelClusters {
    pub fn report(&self, ids: &[u64]) -> ClusterReport {
        ClusterReport {
            novel_class_count: self.novel_class_count,
            exemplar_sample_ids: self.exemplar_rows.iter().map(|&r| ids[r]).collect(),
            cluster_sizes: self.cluster_sizes.clone(),
            converged: self.converged,
            iterations: self.iterations,
        }
    }
}

/// Labels `old_rows` of `inputs` with the previous model's nearest proxy.
pub fn label_old(
    old_rows: &[usize],
    inputs: &Array2<f64>,
    ids: &[u64],
    prev_head: &ProjectionHead,
    prev_bank: &ProxyBank,
) -> Result<Vec<PseudoLabel>> {
    if prev_bank.is_empty() {
        return Err(Error::Empty("proxy bank"));
    }
    if old_rows.is_empty() {
        return Ok(Vec::new());
    }
    let x = inputs.select(Axis(0), old_rows);
    let pred = nearest_proxy(prev_head, prev_bank, &x)?;
    Ok(old_rows
        .iter()
        .zip(pred)
        .map(|(&index, label)| PseudoLabel {
            index,
            sample_id: ids[index],
            label,
            provenance: Provenance::OldPrediction,
        })
        .collect())
}

/// Clusters the embeddings of `new_rows` and numbers clusters from `first_id`.
pub fn label_new(
    new_rows: &[usize],
    embeddings: &Array2<f64>,
    ids: &[u64],
    cfg: &ApConfig,
    first_id: usize,
) -> Result<NovelClusters> {
    if new_rows.is_empty() {
        return Err(Error::Empty("novel split"));
    }
    let points = embeddings.select(Axis(0), new_rows);
    let (exemplars, assignment, converged, iterations) = if new_rows.len() == 1 {
        (vec![0], vec![0], true, 0)
    } else {
        let r = affinity_propagation(&points, cfg)?;
        (r.exemplars, r.assignment, r.converged, r.iterations)
    };

    let k = exemplars.len();
    let d = points.ncols();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut sizes = vec![0usize; k];
    for (row, &c) in points.rows().into_iter().zip(&assignment) {
        let mut s = sums.row_mut(c);
        s += &row;
        sizes[c] += 1;
    }
    let mut centroids = Array2::zeros((k, d));
    for c in 0..k {
        let mean: Array1<f64> = sums.row(c).to_owned() / sizes[c] as f64;
        let n = mean.dot(&mean).sqrt();
        // A cluster whose mean cancels out takes its exemplar's direction.
        let v = if n > 1e-12 {
            mean / n
        } else {
            let e = points.row(exemplars[c]).to_owned();
            let en = e.dot(&e).sqrt();
            if en > 0.0 {
                e / en
            } else {
                return Err(Error::InvalidData("zero-norm cluster".into()));
            }
        };
        centroids.row_mut(c).assign(&v);
    }

    let entries = new_rows
        .iter()
        .zip(&assignment)
        .map(|(&index, &c)| PseudoLabel {
            index,
            sample_id: ids[index],
            label: first_id + c,
            provenance: Provenance::Cluster,
        })
        .collect();
    Ok(NovelClusters {
        entries,
        novel_class_count: k,
        centroids,
        exemplar_rows: exemplars.iter().map(|&e| new_rows[e]).collect(),
        cluster_sizes: sizes,
        converged,
        iterations,
    })
}

/// Appends one proxy per centroid with fresh class ids after the existing ones.
pub fn grow_bank(bank: &ProxyBank, centroids: &Array2<f64>) -> Result<ProxyBank> {
    if centroids.nrows() == 0 {
        return Err(Error::Empty("centroids"));
    }
    let first = bank.next_class_id();
    let ids: Vec<usize> = (first..first + centroids.nrows()).collect();
    bank.with_appended(centroids, &ids)
}
