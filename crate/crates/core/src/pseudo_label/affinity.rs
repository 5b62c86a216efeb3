//! Affinity propagation (Frey & Dueck) with damped message passing.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    /// Median of the off-diagonal similarities.
    Median,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApConfig {
    pub damping: f64,
    pub max_iter: usize,
    /// Stop once the exemplar set has been stable for this many iterations.
    pub convergence_window: usize,
    pub preference: Preference,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self {
            damping: 0.9,
            max_iter: 500,
            convergence_window: 30,
            preference: Preference::Median,
        }
    }
}

impl ApConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.5 && self.damping < 1.0) {
            return Err(Error::Config(format!("damping must be in (0.5,1), got {}", self.damping)));
        }
        if self.max_iter == 0 || self.convergence_window == 0 {
            return Err(Error::Config("max_iter and convergence_window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// Point indices acting as exemplars, ascending.
    pub exemplars: Vec<usize>,
    /// Index into `exemplars` for every point.
    pub assignment: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

/// Negative squared Euclidean distances between rows.
pub fn neg_sq_euclidean(points: &Array2<f64>) -> Array2<f64> {
    let m = points.nrows();
    let rows = par::map_indexed(m, |i| {
        let a = points.row(i);
        (0..m)
            .map(|k| {
                let b = points.row(k);
                -a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            })
            .collect::<Vec<f64>>()
    });
    Array2::from_shape_vec((m, m), rows.concat()).expect("square")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn affinity_propagation(points: &Array2<f64>, cfg: &ApConfig) -> Result<ApResult> {
    cfg.validate()?;
    if points.nrows() < 2 {
        return Err(Error::InvalidData(format!(
            "affinity propagation needs >= 2 points, got {}",
            points.nrows()
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("clustering input"));
    }
    affinity_propagation_similarity(neg_sq_euclidean(points), cfg)
}

/// Runs on a precomputed similarity matrix whose diagonal is overwritten by
/// the preference.
pub fn affinity_propagation_similarity(mut s: Array2<f64>, cfg: &ApConfig) -> Result<ApResult> {
    cfg.validate()?;
    let m = s.nrows();
    if m < 2 || s.ncols() != m {
        return Err(Error::InvalidData("similarity matrix must be square with >= 2 rows".into()));
    }
    let off: Vec<f64> = (0..m)
        .flat_map(|i| (0..m).filter(move |&k| k != i).map(move |k| (i, k)))
        .map(|(i, k)| s[[i, k]])
        .collect();
    let pref = match cfg.preference {
        Preference::Median => median(off.clone()),
        Preference::Value(v) => v,
    };
    for i in 0..m {
        s[[i, i]] = pref;
    }

    // All off-diagonal similarities equal: messages never break the tie.
    if off.iter().all(|&v| v == off[0]) {
        let (exemplars, assignment) = if pref > off[0] {
            ((0..m).collect(), (0..m).collect())
        } else {
            (vec![0], vec![0; m])
        };
        return Ok(ApResult {
            exemplars,
            assignment,
            converged: true,
            iterations: 0,
        });
    }

    let lambda = cfg.damping;
    let mut r = Array2::<f64>::zeros((m, m));
    let mut a = Array2::<f64>::zeros((m, m));
    let mut last: Vec<usize> = Vec::new();
    let mut stable = 0usize;
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..cfg.max_iter {
        iterations = it + 1;

        // r(i,k) = s(i,k) - max_{k' != k} (a(i,k') + s(i,k'))
        let new_r = par::map_indexed(m, |i| {
            let mut best = f64::NEG_INFINITY;
            let mut best_k = 0;
            let mut second = f64::NEG_INFINITY;
            for k in 0..m {
                let v = a[[i, k]] + s[[i, k]];
                if v > best {
                    second = best;
                    best = v;
                    best_k = k;
                } else if v > second {
                    second = v;
                }
            }
            (0..m)
                .map(|k| s[[i, k]] - if k == best_k { second } else { best })
                .collect::<Vec<f64>>()
        });
        for (i, row) in new_r.into_iter().enumerate() {
            for (k, v) in row.into_iter().enumerate() {
                r[[i, k]] = lambda * r[[i, k]] + (1.0 - lambda) * v;
            }
        }

        // a(i,k) = min(0, r(k,k) + sum_{i' not in {i,k}} max(0, r(i',k))), a(k,k) = sum_{i' != k} max(0, r(i',k))
        let new_a = par::map_indexed(m, |k| {
            let pos_sum: f64 = (0..m).filter(|&i| i != k).map(|i| r[[i, k]].max(0.0)).sum();
            (0..m)
                .map(|i| {
                    if i == k {
                        pos_sum
                    } else {
                        (r[[k, k]] + pos_sum - r[[i, k]].max(0.0)).min(0.0)
                    }
                })
                .collect::<Vec<f64>>()
        });
        for (k, col) in new_a.into_iter().enumerate() {
            for (i, v) in col.into_iter().enumerate() {
                a[[i, k]] = lambda * a[[i, k]] + (1.0 - lambda) * v;
            }
        }

        let exemplars: Vec<usize> = (0..m).filter(|&k| a[[k, k]] + r[[k, k]] > 0.0).collect();
        if !exemplars.is_empty() && exemplars == last {
            stable += 1;
            if stable >= cfg.convergence_window {
                converged = true;
                break;
            }
        } else {
            stable = 0;
        }
        last = exemplars;
    }

    let mut exemplars = last;
    if exemplars.is_empty() {
        // No point claims itself: fall back to the single strongest candidate.
        let best = (0..m)
            .max_by(|&x, &y| (a[[x, x]] + r[[x, x]]).total_cmp(&(a[[y, y]] + r[[y, y]])).then(y.cmp(&x)))
            .expect("m >= 2");
        exemplars = vec![best];
        converged = false;
    }
    if !converged {
        log::warn!("affinity propagation did not converge in {} iterations", cfg.max_iter);
    }
    let assignment = assign(&s, &exemplars);
    Ok(ApResult {
        exemplars,
        assignment,
        converged,
        iterations,
    })
}

/// Each point goes to its most similar exemplar (lowest index on ties);
/// exemplars go to themselves.
fn assign(s: &Array2<f64>, exemplars: &[usize]) -> Vec<usize> {
    (0..s.nrows())
        .map(|i| {
            if let Some(pos) = exemplars.iter().position(|&e| e == i) {
                return pos;
            }
            let mut best = 0;
            for (c, &e) in exemplars.iter().enumerate().skip(1) {
                if s[[i, e]] > s[[i, exemplars[best]]] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
