//! Embedding datasets and the continual-discovery scenario builder.

mod emb1;
mod scenario;
mod synthetic;

use std::collections::HashSet;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

pub use emb1::{read_emb1, write_emb1, Manifest, ManifestEntry, Role};
pub use scenario::{build_scenario, round_half_up, HiddenTruth, Scenario, ScenarioConfig, StepDataset};
pub use synthetic::{generate_synthetic, SyntheticConfig};

/// Feature matrix plus optional ground-truth labels.
///
/// Labels are dense class indices. For unlabeled steps they are absent and the
/// truth lives in a [`HiddenTruth`] owned by the evaluation harness.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    features: Array2<f32>,
    labels: Option<Vec<usize>>,
    ids: Vec<u64>,
}

impl EmbeddingDataset {
    pub fn new(features: Array2<f32>, labels: Option<Vec<usize>>, ids: Vec<u64>) -> Result<Self> {
        let n = features.nrows();
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        if ids.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: ids.len(),
            });
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: l.len(),
                });
            }
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::InvalidData(format!("duplicate sample id {dup}")));
        }
        Ok(Self {
            features,
            labels,
            ids,
        })
    }

    /// Dataset with ids `0..N`.
    pub fn with_sequential_ids(features: Array2<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        let ids = (0..features.nrows() as u64).collect();
        Self::new(features, labels, ids)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.features.row(i)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Sorted distinct labels, or an error if the dataset is unlabeled.
    pub fn classes(&self) -> Result<Vec<usize>> {
        let labels = self.labels.as_ref().ok_or(Error::MissingLabels)?;
        let mut c: Vec<usize> = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        Ok(c)
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> EmbeddingDataset {
        let d = self.dim();
        let mut features = Array2::zeros((indices.len(), d));
        for (r, &i) in indices.iter().enumerate() {
            features.row_mut(r).assign(&self.features.row(i));
        }
        EmbeddingDataset {
            features,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Same samples with labels removed.
    pub fn without_labels(&self) -> EmbeddingDataset {
        EmbeddingDataset {
            labels: None,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_non_finite_and_duplicate_ids() {
        let f = array![[1.0f32, f32::NAN]];
        assert!(matches!(
            EmbeddingDataset::with_sequential_ids(f, None),
            Err(Error::NonFinite(_))
        ));
        let f = array![[1.0f32], [2.0]];
        assert!(EmbeddingDataset::new(f, None, vec![4, 4]).is_err());
    }

    #[test]
    fn label_length_must_match() {
        let f = array![[1.0f32], [2.0]];
        assert!(EmbeddingDataset::with_sequential_ids(f, Some(vec![0])).is_err());
    }
}
