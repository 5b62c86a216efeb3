//! Two-component 1-D Gaussian mixture fitted by EM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const VAR_FLOOR: f64 = 1e-8;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Components are ordered by mean: index 0 is the low component, 1 the high one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm1D {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
    /// Total log-likelihood before each M-step and after the final one.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mean) * (x - mean) / var)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Gmm1D {
    /// Log of the weighted component densities at `x`.
    fn log_joint(&self, x: f64) -> [f64; 2] {
        [0, 1].map(|k| self.weights[k].ln() + log_normal(x, self.means[k], self.variances[k]))
    }

    /// Posterior probability of each component at `x`; the two entries sum to 1.
    pub fn responsibilities(&self, x: f64) -> [f64; 2] {
        let [l0, l1] = self.log_joint(x);
        // Compute the smaller posterior directly and the larger as its complement.
        if l0 <= l1 {
            let r0 = 1.0 / (1.0 + (l1 - l0).exp());
            [r0, 1.0 - r0]
        } else {
            let r1 = 1.0 / (1.0 + (l0 - l1).exp());
            [1.0 - r1, r1]
        }
    }

    /// Posterior of the high-mean component.
    pub fn posterior_high(&self, x: f64) -> f64 {
        self.responsibilities(x)[1]
    }

    /// Ashman's D, `sqrt(2) |mu1 - mu0| / sqrt(var0 + var1)`.
    pub fn separation(&self) -> f64 {
        std::f64::consts::SQRT_2 * (self.means[1] - self.means[0]).abs() / (self.variances[0] + self.variances[1]).sqrt()
    }

    pub fn log_likelihood_of(&self, xs: &[f64]) -> f64 {
        xs.iter()
            .map(|&x| {
                let [a, b] = self.log_joint(x);
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            })
            .sum()
    }
}

/// EM from a quantile initialization: means at the 25th/75th percentiles,
/// equal weights, and the pooled variance of each half around its mean.
/// Stops when the mean per-sample log-likelihood gains less than `tol`.
pub fn fit_gmm1d(scores: &[f64], iters: usize, tol: f64) -> Result<Gmm1D> {
    let n = scores.len();
    if n < 4 {
        return Err(Error::InvalidData(format!("GMM needs >= 4 scores, got {n}")));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("GMM scores"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[n - 1] {
        return Err(Error::DegenerateScores(sorted[0]));
    }

    let q25 = quantile(&sorted, 0.25);
    let q75 = quantile(&sorted, 0.75);
    let half = n / 2;
    let ss: f64 = sorted[..half].iter().map(|x| (x - q25).powi(2)).sum::<f64>()
        + sorted[half..].iter().map(|x| (x - q75).powi(2)).sum::<f64>();
    let pooled = (ss / n as f64).max(VAR_FLOOR);
    let mut gmm = Gmm1D {
        weights: [0.5, 0.5],
        means: [q25, q75],
        variances: [pooled, pooled],
        log_likelihood: Vec::new(),
        converged: false,
    };

    let mut resp = vec![[0.0f64; 2]; n];
    for _ in 0..iters {
        let ll = gmm.log_likelihood_of(scores);
        if let Some(&prev) = gmm.log_likelihood.last() {
            if (ll - prev) / (n as f64) < tol {
                gmm.log_likelihood.push(ll);
                gmm.converged = true;
                break;
            }
        }
        gmm.log_likelihood.push(ll);

        for (r, &x) in resp.iter_mut().zip(scores) {
            *r = gmm.responsibilities(x);
        }
        for k in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            if nk < 1e-12 {
                // Collapsed component: keep its location, shrink its weight.
                gmm.weights[k] = 1e-12;
                continue;
            }
            let mean = resp.iter().zip(scores).map(|(r, x)| r[k] * x).sum::<f64>() / nk;
            let var = resp.iter().zip(scores).map(|(r, x)| r[k] * (x - mean).powi(2)).sum::<f64>() / nk;
            gmm.weights[k] = nk / n as f64;
            gmm.means[k] = mean;
            gmm.variances[k] = var.max(VAR_FLOOR);
        }
        let total = gmm.weights[0] + gmm.weights[1];
        gmm.weights = gmm.weights.map(|w| w / total);
    }
    if !gmm.converged {
        let ll = gmm.log_likelihood_of(scores);
        gmm.log_likelihood.push(ll);
    }
    if gmm.means[0] > gmm.means[1] {
        gmm.weights.swap(0, 1);
        gmm.means.swap(0, 1);
        gmm.variances.swap(0, 1);
    }
    Ok(gmm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn recovers_bimodal_mixture() {
        let mut r = rng::stream(4, Stream::Split, 0);
        let mut xs = Vec::new();
        for i in 0..400 {
            let m = if i % 2 == 0 { -0.5 } else { 0.5 };
            xs.push(m + 0.1 * r.sample::<f64, _>(StandardNormal));
        }
        let g = fit_gmm1d(&xs, 100, 1e-6).unwrap();
        assert!((g.means[0] + 0.5).abs() < 0.05);
        assert!((g.means[1] - 0.5).abs() < 0.05);
        assert!((g.weights[0] - 0.5).abs() < 0.05);
        assert!((g.weights[0] + g.weights[1] - 1.0).abs() < 1e-15);
        // Modes 1.0 apart with sd ~0.1: D ~ 7.
        assert!(g.separation() > 6.0);
    }

    #[test]
    fn separation_of_known_mixture() {
        let g = Gmm1D {
            weights: [0.5, 0.5],
            means: [0.0, 2.0],
            variances: [1.0, 1.0],
            log_likelihood: Vec::new(),
            converged: true,
        };
        assert!((g.separation() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_and_short_inputs() {
        assert!(matches!(fit_gmm1d(&[0.3; 10], 100, 1e-6), Err(Error::DegenerateScores(_))));
        assert!(fit_gmm1d(&[0.1, 0.2, 0.3], 100, 1e-6).is_err());
        assert!(fit_gmm1d(&[0.1, f64::NAN, 0.3, 0.4], 100, 1e-6).is_err());
    }

    proptest! {
        #[test]
        fn em_is_monotone_and_responsibilities_normalize(
            xs in proptest::collection::vec(-3.0f64..3.0, 4..80)
        ) {
            prop_assume!(xs.iter().any(|&x| x != xs[0]));
            let g = fit_gmm1d(&xs, 100, 1e-6).unwrap();
            for w in g.log_likelihood.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
            }
            prop_assert!(g.means[0] <= g.means[1]);
            prop_assert!(g.weights.iter().all(|&w| w > 0.0));
            prop_assert!(g.variances.iter().all(|&v| v >= VAR_FLOOR));
            for &x in &xs {
                let r = g.responsibilities(x);
                prop_assert_eq!(r[0] + r[1], 1.0);
            }
        }
    }
}
