use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

impl AdamW {
    /// `param <- param - lr * (m_hat / (sqrt(v_hat) + eps) + wd * param)`.
    pub fn step(&self, params: &mut [f64], grads: &[f64], state: &mut AdamWState, lr: f64, wd: f64) -> Result<()> {
        if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                got: grads.len(),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * *p);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = vec![1.5, -2.0];
        let mut s = AdamWState::new(2);
        AdamW::default().step(&mut p, &[0.0, 0.0], &mut s, 0.1, 0.0).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn pure_decay() {
        let mut p = vec![1.0];
        let mut s = AdamWState::new(1);
        AdamW::default().step(&mut p, &[0.0], &mut s, 0.1, 0.01).unwrap();
        assert!((p[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 at step 1, so the update is lr * g / (|g| + eps).
        let mut p = vec![0.0];
        let mut s = AdamWState::new(1);
        AdamW::default().step(&mut p, &[1.0], &mut s, 0.1, 0.0).unwrap();
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn rejects_nan() {
        let mut p = vec![0.0];
        let mut s = AdamWState::new(1);
        assert!(matches!(
            AdamW::default().step(&mut p, &[f64::NAN], &mut s, 0.1, 0.0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn bit_deterministic() {
        let run = || {
            let mut p = vec![0.3, -0.7, 1.1];
            let mut s = AdamWState::new(3);
            for k in 0..10 {
                let g: Vec<f64> = p.iter().map(|x| x * 0.5 + k as f64 * 0.01).collect();
                AdamW::default().step(&mut p, &g, &mut s, 1e-2, 1e-4).unwrap();
            }
            p.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
