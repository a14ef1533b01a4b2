//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update using the gradients stored in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::usage(
                "optimizer state was built for a different parameter set",
            ));
        }
        if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
            return Err(Error::usage(format!(
                "parameter {} has no gradient",
                p.name
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let grad = p.grad.as_ref().expect("checked above");
            if grad.len() != p.value.len() {
                return Err(Error::dim(format!(
                    "gradient shape mismatch for {}",
                    p.name
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, &g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            if !p.value.is_finite() {
                return Err(Error::numeric(format!(
                    "parameter {} became non-finite",
                    p.name
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("x", Tensor::new(&[1], vec![x]).unwrap())
            .unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        for p in s.iter_mut() {
            p.grad = Some(Tensor::new(&[1], vec![g]).unwrap());
        }
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut s = scalar_store(1.25);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        set_grad(&mut s, 0.0);
        adam.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.25]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.02] {
            let mut s = scalar_store(0.0);
            let cfg = AdamConfig {
                lr: 0.01,
                ..Default::default()
            };
            let mut adam = AdamState::new(&s, cfg);
            set_grad(&mut s, g);
            adam.step(&mut s).unwrap();
            // bias-corrected: mhat = g, vhat = g², step = lr·g/(|g|+eps)
            let expected = -0.01 * g / (g.abs() + 1e-8);
            let got = s.iter().next().unwrap().value.data()[0];
            assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        }
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let mut s = scalar_store(0.0);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        assert!(matches!(adam.step(&mut s), Err(Error::Usage(_))));
    }

    #[test]
    fn quadratic_loss_decreases() {
        // f(x) = (x - 3)², simulated side by side with an independent scalar Adam
        let mut s = scalar_store(-2.0);
        let cfg = AdamConfig {
            lr: 0.02,
            ..Default::default()
        };
        let mut adam = AdamState::new(&s, cfg);
        let (mut x, mut m, mut v) = (-2.0f64, 0.0f64, 0.0f64);
        let mut prev = f64::INFINITY;
        for t in 1..=100 {
            let cur = s.iter().next().unwrap().value.data()[0];
            let loss = (cur - 3.0).powi(2);
            assert!(loss < prev, "loss rose at step {t}");
            prev = loss;
            set_grad(&mut s, 2.0 * (cur - 3.0));
            adam.step(&mut s).unwrap();

            let g = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.02 * mh / (vh.sqrt() + 1e-8);
            assert!((s.iter().next().unwrap().value.data()[0] - x).abs() < 1e-12);
        }
    }
}
