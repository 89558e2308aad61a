//! Adam with linear warmup, linear decay and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub warmup_updates: u64,
    /// Linear decay to zero at this update; `0` keeps the rate constant
    /// after warmup.
    pub total_updates: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.1,
            warmup_updates: 500,
            total_updates: 0,
        }
    }
}

impl AdamConfig {
    /// Learning rate for update number `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = if self.warmup_updates > 0 && step < self.warmup_updates {
            step as f64 / self.warmup_updates as f64
        } else {
            1.0
        };
        let decay = if self.total_updates > self.warmup_updates && step > self.warmup_updates {
            let span = (self.total_updates - self.warmup_updates) as f64;
            (1.0 - (step - self.warmup_updates) as f64 / span).max(0.0)
        } else {
            1.0
        };
        self.lr * warm * decay
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        Adam {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Applies one update from `grads` and returns the pre-clip global norm.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> f64 {
        assert_eq!(grads.len(), params.tensors.len());
        let norm = grads
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|&x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        let c = &self.config;
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let lr = c.lr_at(self.step);
        let (b1, b2) = (c.beta1, c.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = T::f(lr / bc1);
        let (b1t, b2t) = (T::f(b1), T::f(b2));
        let (ob1, ob2) = (T::f(1.0 - b1), T::f(1.0 - b2));
        let (eps, bc2_sqrt, clip_t) = (T::f(c.eps), T::f(bc2.sqrt()), T::f(clip));
        for (((p, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i] * clip_t;
                m.data[i] = b1t * m.data[i] + ob1 * gi;
                v.data[i] = b2t * v.data[i] + ob2 * gi * gi;
                let denom = v.data[i].sqrt() / bc2_sqrt + eps;
                p.data[i] -= step_size * m.data[i] / denom;
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = AdamConfig {
            lr: 1.0,
            warmup_updates: 4,
            total_updates: 8,
            ..AdamConfig::default()
        };
        let lrs: Vec<f64> = (1..=9).map(|s| c.lr_at(s)).collect();
        assert_eq!(lrs, [0.25, 0.5, 0.75, 1.0, 0.75, 0.5, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        // With bias correction, |Δ| = lr * |g| / (|g| + eps) on step one.
        let mut p = ParamSet::<f64> {
            names: vec!["w".into()],
            tensors: vec![Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0])],
        };
        let c = AdamConfig {
            lr: 0.1,
            warmup_updates: 0,
            clip_norm: 0.0,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(c, &p);
        opt.update(&mut p, &[Tensor::from_vec(1, 3, vec![0.5, -2.0, 0.0])]);
        let got = &p.tensors[0].data;
        assert!((got[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
        assert!((got[1] - (2.0 + 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-12);
        assert_eq!(got[2], 3.0);
    }

    #[test]
    fn clipping_rescales_large_gradients() {
        let mk = || ParamSet::<f64> {
            names: vec!["w".into()],
            tensors: vec![Tensor::from_vec(1, 2, vec![0.0, 0.0])],
        };
        let c = AdamConfig {
            lr: 0.1,
            warmup_updates: 0,
            clip_norm: 1.0,
            ..AdamConfig::default()
        };
        let (mut a, mut b) = (mk(), mk());
        let mut oa = Adam::new(c.clone(), &a);
        let mut ob = Adam::new(c, &b);
        let norm = oa.update(&mut a, &[Tensor::from_vec(1, 2, vec![30.0, 40.0])]);
        ob.update(&mut b, &[Tensor::from_vec(1, 2, vec![0.6, 0.8])]);
        assert_eq!(norm, 50.0);
        for (x, y) in a.tensors[0].data.iter().zip(&b.tensors[0].data) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
