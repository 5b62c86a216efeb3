//! Old/new binary classifier: FC - BN - sigmoid - FC - BN - sigmoid - FC.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::Result;
use crate::metric_head::{AdamW, AdamWState};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: Array2<f64>,
    b: Array1<f64>,
}

impl Dense {
    fn new(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound)),
            b: Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound)),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BatchNorm {
    gamma: Array1<f64>,
    beta: Array1<f64>,
    running_mean: Array1<f64>,
    running_var: Array1<f64>,
}

struct BnCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm {
    fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
            running_mean: Array1::zeros(d),
            running_var: Array1::ones(d),
        }
    }

    fn forward_train(&mut self, x: &Array2<f64>) -> (Array2<f64>, BnCache) {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let x_hat = &centered * &inv_std;
        let y = &x_hat * &self.gamma + &self.beta;

        let unbiased = if n > 1.0 { &var * (n / (n - 1.0)) } else { var.clone() };
        self.running_mean = &self.running_mean * BN_MOMENTUM + &mean * (1.0 - BN_MOMENTUM);
        self.running_var = &self.running_var * BN_MOMENTUM + &unbiased * (1.0 - BN_MOMENTUM);
        (y, BnCache { x_hat, inv_std })
    }

    /// Sets the running statistics to the mean and (biased) variance of `x`.
    fn set_statistics(&mut self, x: &Array2<f64>) {
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let var = (x - &mean).mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
        self.running_mean = mean;
        self.running_var = var;
    }

    fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        (x - &self.running_mean) * &inv_std * &self.gamma + &self.beta
    }

    /// Returns (dx, dgamma, dbeta).
    fn backward(&self, dy: &Array2<f64>, cache: &BnCache) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let n = dy.nrows() as f64;
        let dbeta = dy.sum_axis(Axis(0));
        let dgamma = (dy * &cache.x_hat).sum_axis(Axis(0));
        let dx_hat = dy * &self.gamma;
        let sum_dx_hat = dx_hat.sum_axis(Axis(0));
        let sum_dx_hat_xhat = (&dx_hat * &cache.x_hat).sum_axis(Axis(0));
        let dx = (&dx_hat * n - &sum_dx_hat - &cache.x_hat * &sum_dx_hat_xhat) * &cache.inv_std / n;
        (dx, dgamma, dbeta)
    }
}

/// Parameters and batch-norm statistics of the split network.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitNetParams {
    fc1: Dense,
    bn1: BatchNorm,
    fc2: Dense,
    bn2: BatchNorm,
    fc3: Dense,
}

struct Grads {
    fc1: (Array2<f64>, Array1<f64>),
    bn1: (Array1<f64>, Array1<f64>),
    fc2: (Array2<f64>, Array1<f64>),
    bn2: (Array1<f64>, Array1<f64>),
    fc3: (Array2<f64>, Array1<f64>),
}

/// One optimizer state per tensor, in the order of `SplitNetParams::tensors_mut`.
pub(crate) struct SplitNetOptimizer {
    states: Vec<AdamWState>,
    opt: AdamW,
}

impl SplitNetParams {
    /// Hidden width `max(64, d_emb / 2)`.
    pub fn new(d_emb: usize, rng: &mut impl Rng) -> Self {
        let h = 64.max(d_emb / 2);
        Self {
            fc1: Dense::new(d_emb, h, rng),
            bn1: BatchNorm::new(h),
            fc2: Dense::new(h, h, rng),
            bn2: BatchNorm::new(h),
            fc3: Dense::new(h, 1, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fc1.w.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.w.ncols()
    }

    pub fn is_finite(&self) -> bool {
        let all = [
            self.fc1.w.iter(),
            self.fc2.w.iter(),
            self.fc3.w.iter(),
        ];
        all.into_iter().flatten().all(|v| v.is_finite())
            && self.bn1.running_var.iter().all(|v| *v > 0.0)
            && self.bn2.running_var.iter().all(|v| *v > 0.0)
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 10] {
        [
            self.fc1.w.as_slice_mut().unwrap(),
            self.fc1.b.as_slice_mut().unwrap(),
            self.bn1.gamma.as_slice_mut().unwrap(),
            self.bn1.beta.as_slice_mut().unwrap(),
            self.fc2.w.as_slice_mut().unwrap(),
            self.fc2.b.as_slice_mut().unwrap(),
            self.bn2.gamma.as_slice_mut().unwrap(),
            self.bn2.beta.as_slice_mut().unwrap(),
            self.fc3.w.as_slice_mut().unwrap(),
            self.fc3.b.as_slice_mut().unwrap(),
        ]
    }

    pub(crate) fn optimizer(&mut self) -> SplitNetOptimizer {
        SplitNetOptimizer {
            states: self.tensors_mut().iter().map(|t| AdamWState::new(t.len())).collect(),
            opt: AdamW::default(),
        }
    }

    /// Probability of "new" for every row, using running batch-norm statistics.
    pub fn predict(&self, x: &Array2<f64>) -> Vec<f64> {
        let a1 = self.bn1.forward_eval(&self.fc1.forward(x)).mapv(sigmoid);
        let a2 = self.bn2.forward_eval(&self.fc2.forward(&a1)).mapv(sigmoid);
        self.fc3.forward(&a2).column(0).iter().map(|&l| sigmoid(l)).collect()
    }

    /// Replaces the running batch-norm statistics with the exact statistics of
    /// `x`, layer by layer. With few optimizer steps the exponential averages
    /// are still dominated by their initial values; afterwards inference on
    /// `x` matches a training-mode pass over `x` as one batch.
    pub(crate) fn recalibrate(&mut self, x: &Array2<f64>) {
        if x.nrows() == 0 {
            return;
        }
        let h1 = self.fc1.forward(x);
        self.bn1.set_statistics(&h1);
        let a1 = self.bn1.forward_eval(&h1).mapv(sigmoid);
        let h2 = self.fc2.forward(&a1);
        self.bn2.set_statistics(&h2);
    }

    /// One optimizer step on a batch with batch statistics; returns the mean BCE.
    pub(crate) fn train_batch(
        &mut self,
        x: &Array2<f64>,
        targets: &[f64],
        optim: &mut SplitNetOptimizer,
        lr: f64,
        wd: f64,
    ) -> Result<f64> {
        let (loss, flat) = self.loss_and_grads(x, targets);
        let SplitNetOptimizer { states, opt } = optim;
        for ((t, g), s) in self.tensors_mut().into_iter().zip(flat.iter()).zip(states.iter_mut()) {
            opt.step(t, g, s, lr, wd)?;
        }
        Ok(loss)
    }

    /// Mean BCE of a training-mode forward pass and the gradient of every
    /// tensor. Updates the running batch-norm statistics.
    fn loss_and_grads(&mut self, x: &Array2<f64>, targets: &[f64]) -> (f64, [Vec<f64>; 10]) {
        let n = x.nrows() as f64;
        let h1 = self.fc1.forward(x);
        let (b1, c1) = self.bn1.forward_train(&h1);
        let a1 = b1.mapv(sigmoid);
        let h2 = self.fc2.forward(&a1);
        let (b2, c2) = self.bn2.forward_train(&h2);
        let a2 = b2.mapv(sigmoid);
        let logits = self.fc3.forward(&a2).column(0).to_owned();

        let loss = logits
            .iter()
            .zip(targets)
            .map(|(&l, &y)| softplus(l) - y * l)
            .sum::<f64>()
            / n;
        let dlogit = Array1::from_iter(logits.iter().zip(targets).map(|(&l, &y)| (sigmoid(l) - y) / n));
        let dl = dlogit.clone().insert_axis(Axis(1));

        let g_fc3 = (dl.t().dot(&a2), Array1::from_elem(1, dlogit.sum()));
        let da2 = dl.dot(&self.fc3.w);
        let db2 = &da2 * &a2.mapv(|a| a * (1.0 - a));
        let (dh2, dg2, dbe2) = self.bn2.backward(&db2, &c2);
        let g_fc2 = (dh2.t().dot(&a1), dh2.sum_axis(Axis(0)));
        let da1 = dh2.dot(&self.fc2.w);
        let db1 = &da1 * &a1.mapv(|a| a * (1.0 - a));
        let (dh1, dg1, dbe1) = self.bn1.backward(&db1, &c1);
        let g_fc1 = (dh1.t().dot(x), dh1.sum_axis(Axis(0)));

        let grads = Grads {
            fc1: g_fc1,
            bn1: (dg1, dbe1),
            fc2: g_fc2,
            bn2: (dg2, dbe2),
            fc3: g_fc3,
        };
        let flat: [Vec<f64>; 10] = [
            grads.fc1.0.iter().copied().collect(),
            grads.fc1.1.to_vec(),
            grads.bn1.0.to_vec(),
            grads.bn1.1.to_vec(),
            grads.fc2.0.iter().copied().collect(),
            grads.fc2.1.to_vec(),
            grads.bn2.0.to_vec(),
            grads.bn2.1.to_vec(),
            grads.fc3.0.iter().copied().collect(),
            grads.fc3.1.to_vec(),
        ];
        (loss, flat)
    }
}
