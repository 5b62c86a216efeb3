//! Proxy-anchor loss with analytic gradients.
//!
//! For proxies `P`, positive proxies `P+` (classes present in the batch), and
//! cosine similarity `s`:
//!
//! ```text
//! L = 1/|P+| sum_{p in P+} log(1 + sum_{z in Z+_p} exp(-alpha (s(z,p) - delta)))
//!   + 1/|P|  sum_{p in P}  log(1 + sum_{z in Z-_p} exp( alpha (s(z,p) + delta)))
//! ```

use ndarray::{Array1, Array2};

use super::{stack_rows, ProxyBank};
use crate::error::{Error, Result};
use crate::par;

const SIM_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone)]
pub struct PaLoss {
    pub loss: f64,
    /// Same shape as the batch.
    pub grad_z: Array2<f64>,
    /// Same shape as the proxy matrix.
    pub grad_proxies: Array2<f64>,
}

/// `log(1 + sum exp(v))` and the weights `exp(v_i) / (1 + sum exp(v))`,
/// shifted by the largest exponent.
fn log1p_sum_exp(v: &[f64]) -> (f64, Vec<f64>) {
    if v.is_empty() {
        return (0.0, Vec::new());
    }
    let m = v.iter().copied().fold(0.0f64, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let denom = (-m).exp() + exps.iter().sum::<f64>();
    let value = m + denom.ln();
    (value, exps.into_iter().map(|e| e / denom).collect())
}

fn unit_rows(a: &Array2<f64>, what: &'static str) -> Result<(Array2<f64>, Vec<f64>)> {
    let norms: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if norms.contains(&0.0) {
        return Err(Error::InvalidData(format!("zero row in {what}")));
    }
    if norms.iter().any(|n| !n.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    let mut unit = a.clone();
    for (mut row, n) in unit.rows_mut().into_iter().zip(&norms) {
        row /= *n;
    }
    Ok((unit, norms))
}

pub fn pa_loss(batch_z: &Array2<f64>, labels: &[usize], bank: &ProxyBank, alpha: f64, delta: f64) -> Result<PaLoss> {
    let b = batch_z.nrows();
    if b == 0 {
        return Err(Error::Empty("batch"));
    }
    if labels.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            got: labels.len(),
        });
    }
    if batch_z.ncols() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            got: batch_z.ncols(),
        });
    }
    let label_rows: Vec<usize> = labels
        .iter()
        .map(|&l| bank.row_of(l).ok_or(Error::UnknownLabel(l)))
        .collect::<Result<_>>()?;

    let (zu, zn) = unit_rows(batch_z, "embeddings")?;
    let (pu, pn) = unit_rows(bank.proxies(), "proxies")?;
    let sim = zu.dot(&pu.t());
    let n_proxies = bank.len();

    let mut present = vec![false; n_proxies];
    for &r in &label_rows {
        present[r] = true;
    }
    let n_pos = present.iter().filter(|&&p| p).count() as f64;
    let n_all = n_proxies as f64;

    // Per proxy: (positive term, negative term, dL/ds for every batch row).
    let columns: Vec<(f64, f64, Vec<f64>)> = par::map_indexed(n_proxies, |j| {
        let mut pos_idx = Vec::new();
        let mut pos_arg = Vec::new();
        let mut neg_idx = Vec::new();
        let mut neg_arg = Vec::new();
        for i in 0..b {
            let s = sim[[i, j]].clamp(-SIM_CLAMP, SIM_CLAMP);
            if label_rows[i] == j {
                pos_idx.push(i);
                pos_arg.push(-alpha * (s - delta));
            } else {
                neg_idx.push(i);
                neg_arg.push(alpha * (s + delta));
            }
        }
        let mut ds = vec![0.0; b];
        let (pos_val, pos_w) = log1p_sum_exp(&pos_arg);
        for (&i, w) in pos_idx.iter().zip(pos_w) {
            ds[i] = -alpha * w / n_pos;
        }
        let (neg_val, neg_w) = log1p_sum_exp(&neg_arg);
        for (&i, w) in neg_idx.iter().zip(neg_w) {
            ds[i] = alpha * w / n_all;
        }
        (pos_val, neg_val, ds)
    });

    let mut pos_sum = 0.0;
    let mut neg_sum = 0.0;
    for (p, n, _) in &columns {
        pos_sum += p;
        neg_sum += n;
    }
    let loss = pos_sum / n_pos + neg_sum / n_all;

    // ds/dz = (p^ - s z^) / |z|, ds/dp = (z^ - s p^) / |p|
    let d = batch_z.ncols();
    let grad_z_rows: Vec<Array1<f64>> = par::map_indexed(b, |i| {
        let mut g = Array1::zeros(d);
        let zi = zu.row(i);
        for (j, col) in columns.iter().enumerate() {
            let c = col.2[i];
            if c != 0.0 {
                let s = sim[[i, j]];
                g.scaled_add(c, &pu.row(j));
                g.scaled_add(-c * s, &zi);
            }
        }
        g / zn[i]
    });
    let grad_p_rows: Vec<Array1<f64>> = par::map_indexed(n_proxies, |j| {
        let mut g = Array1::zeros(d);
        let pj = pu.row(j);
        let ds = &columns[j].2;
        for (i, &c) in ds.iter().enumerate() {
            if c != 0.0 {
                let s = sim[[i, j]];
                g.scaled_add(c, &zu.row(i));
                g.scaled_add(-c * s, &pj);
            }
        }
        g / pn[j]
    });

    Ok(PaLoss {
        loss,
        grad_z: stack_rows(&grad_z_rows, d),
        grad_proxies: stack_rows(&grad_p_rows, d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Direct evaluation of the loss formula, no shifts, no clamping.
    fn naive_loss(z: &Array2<f64>, labels: &[usize], proxies: &Array2<f64>, ids: &[usize], alpha: f64, delta: f64) -> f64 {
        let cos = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
        let mut pos = 0.0;
        let mut n_pos = 0;
        let mut neg = 0.0;
        for (j, &cls) in ids.iter().enumerate() {
            let p = proxies.row(j);
            let mut sp = 0.0;
            let mut sn = 0.0;
            let mut any = false;
            for (i, &l) in labels.iter().enumerate() {
                let s = cos(z.row(i), p);
                if l == cls {
                    any = true;
                    sp += (-alpha * (s - delta)).exp();
                } else {
                    sn += (alpha * (s + delta)).exp();
                }
            }
            if any {
                n_pos += 1;
                pos += (1.0 + sp).ln();
            }
            neg += (1.0 + sn).ln();
        }
        pos / n_pos as f64 + neg / ids.len() as f64
    }

    fn random_instance(seed: u64, b: usize, c: usize, d: usize) -> (Array2<f64>, Vec<usize>, ProxyBank) {
        let mut r = rng::stream(seed, Stream::Init, 99);
        let z = Array2::from_shape_fn((b, d), |_| r.sample::<f64, _>(StandardNormal));
        let p = Array2::from_shape_fn((c, d), |_| r.sample::<f64, _>(StandardNormal));
        let labels = (0..b).map(|_| r.random_range(0..c) + 10).collect();
        (z, labels, ProxyBank::new(p, (10..10 + c).collect()).unwrap())
    }

    #[test]
    fn single_sample_aligned() {
        let p = array![[3.0, 4.0]];
        let bank = ProxyBank::new(p, vec![0]).unwrap();
        let z = array![[0.6, 0.8]];
        let out = pa_loss(&z, &[0], &bank, 32.0, 0.1).unwrap();
        let expected = (-32.0f64 * 0.9).exp().ln_1p();
        assert!((out.loss - expected).abs() < 1e-15);
        assert!((out.loss - 3.1e-13).abs() < 0.1e-13);
    }

    #[test]
    fn perfect_alignment_is_near_zero() {
        let bank = ProxyBank::new(array![[1.0, 0.0], [-1.0, 0.0]], vec![0, 1]).unwrap();
        let z = array![[2.0, 0.0], [-0.5, 0.0]];
        let out = pa_loss(&z, &[0, 1], &bank, 32.0, 0.1).unwrap();
        let floor = (-32.0f64 * 0.9).exp().ln_1p();
        assert!(out.loss >= floor);
        assert!(out.loss < 1e-10);
    }

    #[test]
    fn matches_naive_formula() {
        for seed in 0..20 {
            let (z, l, bank) = random_instance(seed, 6, 3, 5);
            let out = pa_loss(&z, &l, &bank, 32.0, 0.1).unwrap();
            let naive = naive_loss(&z, &l, bank.proxies(), bank.class_ids(), 32.0, 0.1);
            assert!((out.loss - naive).abs() <= 1e-9 * naive.abs().max(1.0), "{} vs {}", out.loss, naive);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-4;
        let (z, l, bank) = random_instance(7, 6, 3, 4);
        let out = pa_loss(&z, &l, &bank, 32.0, 0.1).unwrap();
        for idx in [(0, 0), (2, 3), (5, 1)] {
            let mut zp = z.clone();
            zp[idx] += h;
            let mut zm = z.clone();
            zm[idx] -= h;
            let fd = (pa_loss(&zp, &l, &bank, 32.0, 0.1).unwrap().loss - pa_loss(&zm, &l, &bank, 32.0, 0.1).unwrap().loss) / (2.0 * h);
            let g = out.grad_z[idx];
            assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-3), "{fd} vs {g}");
        }
    }

    #[test]
    fn errors() {
        let bank = ProxyBank::new(array![[1.0, 0.0]], vec![0]).unwrap();
        assert!(matches!(pa_loss(&Array2::zeros((0, 2)), &[], &bank, 32.0, 0.1), Err(Error::Empty(_))));
        assert!(matches!(pa_loss(&array![[1.0, 0.0]], &[3], &bank, 32.0, 0.1), Err(Error::UnknownLabel(3))));
    }

    proptest! {
        #[test]
        fn loss_non_negative_and_scale_invariant(seed in 0u64..1000, k in 0.01f64..100.0) {
            let (z, l, bank) = random_instance(seed, 5, 3, 4);
            let out = pa_loss(&z, &l, &bank, 32.0, 0.1).unwrap();
            prop_assert!(out.loss >= 0.0);

            let mut z2 = z.clone();
            z2.row_mut(1).mapv_inplace(|v| v * k);
            let mut p2 = bank.proxies().clone();
            p2.row_mut(0).mapv_inplace(|v| v * 2.0);
            let bank2 = ProxyBank::new(p2, bank.class_ids().to_vec()).unwrap();
            let out2 = pa_loss(&z2, &l, &bank2, 32.0, 0.1).unwrap();
            prop_assert!((out.loss - out2.loss).abs() <= 1e-12 * out.loss.max(1.0));
            // Gradients scale by 1/k but keep their direction.
            let g1 = out.grad_z.row(1).to_owned();
            let g2 = out2.grad_z.row(1).to_owned() * k;
            for (a, b) in g1.iter().zip(g2.iter()) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-6));
            }
        }
    }
}
