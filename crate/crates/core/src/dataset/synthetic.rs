//! Gaussian-blob stand-in for backbone features.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub d_in: usize,
    pub separation: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn generate(&self) -> Result<EmbeddingDataset> {
        generate_synthetic(self.n_classes, self.per_class, self.d_in, self.separation, self.seed)
    }
}

/// Samples `per_class` points from each of `n_classes` unit-variance isotropic
/// Gaussians whose means are pairwise at least `separation` apart and share a
/// common offset from the origin.
///
/// When `n_classes <= d_in` the means sit on scaled orthonormal directions, so
/// every pair is exactly `separation` apart. Otherwise random directions are
/// scaled up until the closest pair clears `separation`.
pub fn generate_synthetic(
    n_classes: usize,
    per_class: usize,
    d_in: usize,
    separation: f64,
    seed: u64,
) -> Result<EmbeddingDataset> {
    if n_classes < 2 || per_class < 2 || d_in == 0 {
        return Err(Error::Config(format!(
            "synthetic dataset needs n_classes >= 2, per_class >= 2, d_in >= 1 (got {n_classes}, {per_class}, {d_in})"
        )));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("separation must be positive, got {separation}")));
    }
    let mut rng = rng::stream(seed, Stream::Synthetic, 0);
    let mut means = class_means(n_classes, d_in, separation, &mut rng);
    // Shared component of norm `separation` along the all-ones direction, like
    // the common positive mean of pooled backbone features. Pairwise
    // distances are unchanged.
    let offset = separation / (d_in as f64).sqrt();
    for m in &mut means {
        m.iter_mut().for_each(|v| *v += offset);
    }

    let n = n_classes * per_class;
    let mut features = Array2::<f32>::zeros((n, d_in));
    let mut labels = Vec::with_capacity(n);
    for c in 0..n_classes {
        for k in 0..per_class {
            let mut row = features.row_mut(c * per_class + k);
            for (j, v) in row.iter_mut().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                *v = (means[c][j] + noise) as f32;
            }
            labels.push(c);
        }
    }
    EmbeddingDataset::with_sequential_ids(features, Some(labels))
}

fn class_means(n: usize, d: usize, separation: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut gaussian = || (0..d).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>();

    if n <= d {
        // Gram-Schmidt on Gaussian vectors gives a random orthonormal frame.
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
        while basis.len() < n {
            let mut v = gaussian();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
        }
        let scale = separation / std::f64::consts::SQRT_2;
        return basis
            .into_iter()
            .map(|v| v.into_iter().map(|x| x * scale).collect())
            .collect();
    }

    let dirs: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v = gaussian();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut min_dist = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = dirs[i].iter().zip(&dirs[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            min_dist = min_dist.min(d2.sqrt());
        }
    }
    // Exactly coincident directions are vanishingly unlikely; guard anyway.
    let scale = separation / min_dist.max(1e-9);
    dirs.into_iter()
        .map(|v| v.into_iter().map(|x| x * scale).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centroid_accuracy(ds: &EmbeddingDataset, n_classes: usize) -> f64 {
        let labels = ds.labels().unwrap();
        let d = ds.dim();
        let mut centroids = vec![vec![0.0f64; d]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (c, v) in centroids[l].iter_mut().zip(ds.row(i)) {
                *c += *v as f64;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let correct = (0..ds.len())
            .filter(|&i| {
                let row = ds.row(i);
                let best = (0..n_classes)
                    .min_by(|&a, &b| {
                        let da: f64 = row.iter().zip(&centroids[a]).map(|(x, c)| (*x as f64 - c).powi(2)).sum();
                        let db: f64 = row.iter().zip(&centroids[b]).map(|(x, c)| (*x as f64 - c).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == labels[i]
            })
            .count();
        correct as f64 / ds.len() as f64
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic(3, 50, 8, 12.0, 7).unwrap();
        let b = generate_synthetic(3, 50, 8, 12.0, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(3, 50, 8, 12.0, 8).unwrap();
        assert_ne!(a.features(), c.features());
    }

    #[test]
    fn nearest_centroid_recovers_labels() {
        let ds = generate_synthetic(5, 40, 16, 10.0, 3).unwrap();
        assert!(centroid_accuracy(&ds, 5) >= 0.99);
        let far = generate_synthetic(4, 20, 3, 1e6, 3).unwrap();
        assert_eq!(centroid_accuracy(&far, 4), 1.0);
    }

    #[test]
    fn means_respect_separation_when_classes_exceed_dims() {
        let mut rng = rng::stream(1, Stream::Synthetic, 0);
        let means = class_means(12, 3, 5.0, &mut rng);
        for i in 0..12 {
            for j in i + 1..12 {
                let d: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d >= 5.0 - 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(generate_synthetic(1, 10, 4, 1.0, 0).is_err());
        assert!(generate_synthetic(3, 1, 4, 1.0, 0).is_err());
        assert!(generate_synthetic(3, 10, 0, 1.0, 0).is_err());
        assert!(generate_synthetic(3, 10, 4, 0.0, 0).is_err());
    }
}
