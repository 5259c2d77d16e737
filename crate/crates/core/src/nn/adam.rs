//! Adam with decoupled weight decay.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Array2<f64>>,
    pub second: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a Array2<f64>>) -> Self {
        let first: Vec<_> = shapes.into_iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    /// One update of every parameter. Nothing is modified when a gradient
    /// holds a non-finite value.
    pub fn step(&mut self, names: &[&str], params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.first.len());
        let next = self.step + 1;
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    step: next,
                    param: names.get(i).copied().unwrap_or("?").to_string(),
                });
            }
        }
        self.step = next;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(next as i32);
        let bias2 = 1.0 - c.beta2.powi(next as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            if c.weight_decay != 0.0 {
                p.mapv_inplace(|x| x - c.lr * c.weight_decay * x);
            }
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bias1;
                    let vhat = *v / bias2;
                    *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut p = array![[1.0, -2.0]];
        let before = p.clone();
        let mut s = AdamState::new(AdamConfig::new(1e-3, 0.0), [&p]);
        s.step(&["p"], &mut [&mut p], &[Array2::zeros((1, 2))]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = array![[0.0]];
        let mut s = AdamState::new(AdamConfig::new(1e-4, 0.0), [&p]);
        s.step(&["p"], &mut [&mut p], &[array![[1.0]]]).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        assert!((p[[0, 0]] + 1e-4 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = array![[0.0]];
        let mut s = AdamState::new(AdamConfig::new(1e-4, 0.0), [&p]);
        let err = s.step(&["encoder.w1"], &mut [&mut p], &[array![[f64::NAN]]]).unwrap_err();
        match err {
            Error::NonFiniteGradient { step, param } => {
                assert_eq!(step, 1);
                assert_eq!(param, "encoder.w1");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.step, 0);
    }
}
