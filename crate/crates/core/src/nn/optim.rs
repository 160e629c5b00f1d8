use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Float, Module};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay. Moment buffers are keyed by parameter
/// name so a model can be rebuilt between steps.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter using its accumulated
    /// gradient. Gradients are left untouched.
    pub fn step<M: Module<T> + ?Sized>(&mut self, model: &mut M) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let step_size = T::of(c.lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(c.eps);
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        for (name, p) in model.named_params_mut() {
            if !p.trainable {
                continue;
            }
            let n = p.numel();
            let (m, v) = self.moments.entry(name).or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                *w *= decay;
                *w -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, Tensor};

    struct One(Param<f64>);

    impl Module<f64> for One {
        fn named_params(&self) -> Vec<(String, &Param<f64>)> {
            vec![("w".into(), &self.0)]
        }
        fn named_params_mut(&mut self) -> Vec<(String, &mut Param<f64>)> {
            vec![("w".into(), &mut self.0)]
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = One(Param::new(Tensor::full(&[2], 1.0)));
        m.0.grad = vec![0.5, -3.0];
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::with_lr(0.1) });
        opt.step(&mut m);
        let d = m.0.value.data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut m = One(Param::new(Tensor::full(&[1], 2.0)));
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.1));
        opt.step(&mut m);
        assert!((m.0.value.data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut m = One(Param::new(Tensor::full(&[1], 2.0)));
        m.0.trainable = false;
        m.0.grad = vec![1.0];
        AdamW::new(AdamWConfig::with_lr(0.1)).step(&mut m);
        assert_eq!(m.0.value.data()[0], 2.0);
    }
}
