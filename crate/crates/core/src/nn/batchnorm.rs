use serde::{Deserialize, Serialize};

use super::{missing_cache, Float, Mode, Module, Param, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormSpec {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormSpec {
    pub fn new(channels: usize) -> Self {
        Self { channels, eps: 1e-5, momentum: 0.1 }
    }
}

struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: [usize; 3],
}

/// Batch normalization over `N × C × L`, statistics per channel across `(N, L)`.
pub struct BatchNorm1d<T: Float> {
    pub spec: BatchNormSpec,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Float> Clone for BatchNorm1d<T> {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec,
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            cache: None,
        }
    }
}

impl<T: Float> BatchNorm1d<T> {
    pub fn new(spec: BatchNormSpec) -> Self {
        let c = spec.channels;
        Self {
            spec,
            gamma: Param::new(Tensor::full(&[c], T::one())),
            beta: Param::new(Tensor::zeros(&[c])),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::full(&[c], T::one()),
            cache: None,
        }
    }

    fn dims(&self, x: &Tensor<T>) -> Result<[usize; 3]> {
        x.expect_rank(3, "batchnorm1d")?;
        let s = x.shape();
        if s[1] != self.spec.channels {
            return Err(Error::validation(format!(
                "batchnorm1d expects {} channels, got {}",
                self.spec.channels, s[1]
            )));
        }
        Ok([s[0], s[1], s[2]])
    }

    /// Normalizes with the running statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, l] = self.dims(x)?;
        let eps = T::of(self.spec.eps);
        let mut out = x.clone();
        let data = out.data_mut();
        for ch in 0..c {
            let inv = T::one() / (self.running_var.data()[ch] + eps).sqrt();
            let scale = self.gamma.value.data()[ch] * inv;
            let mean = self.running_mean.data()[ch];
            let shift = self.beta.value.data()[ch];
            for s in 0..n {
                for v in &mut data[(s * c + ch) * l..(s * c + ch + 1) * l] {
                    *v = (*v - mean) * scale + shift;
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Eval {
            self.cache = None;
            return self.infer(x);
        }
        let [n, c, l] = self.dims(x)?;
        let count = n * l;
        if count == 0 {
            return Err(Error::validation("batchnorm1d: empty batch in train mode"));
        }
        let m = T::of(count as f64);
        let eps = T::of(self.spec.eps);
        let momentum = T::of(self.spec.momentum);
        let mut out = Tensor::zeros(&[n, c, l]);
        let mut xhat = vec![T::zero(); n * c * l];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = T::zero();
            for s in 0..n {
                sum += x.data()[(s * c + ch) * l..(s * c + ch + 1) * l].iter().copied().sum();
            }
            let mean = sum / m;
            let mut sq = T::zero();
            for s in 0..n {
                for &v in &x.data()[(s * c + ch) * l..(s * c + ch + 1) * l] {
                    sq += (v - mean) * (v - mean);
                }
            }
            let var = sq / m;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[ch] = inv;
            let g = self.gamma.value.data()[ch];
            let b = self.beta.value.data()[ch];
            for s in 0..n {
                let base = (s * c + ch) * l;
                for i in base..base + l {
                    let h = (x.data()[i] - mean) * inv;
                    xhat[i] = h;
                    out.data_mut()[i] = h * g + b;
                }
            }
            let unbiased = if count > 1 { sq / T::of((count - 1) as f64) } else { var };
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = (T::one() - momentum) * *rm + momentum * mean;
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = (T::one() - momentum) * *rv + momentum * unbiased;
        }
        self.cache = Some(BnCache { xhat, inv_std, shape: [n, c, l] });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batchnorm1d"))?;
        let [n, c, l] = cache.shape;
        if grad_out.shape() != cache.shape {
            return Err(Error::validation("batchnorm1d backward: gradient shape mismatch"));
        }
        let m = T::of((n * l) as f64);
        let dy = grad_out.data();
        let mut dx = Tensor::zeros(&[n, c, l]);
        for ch in 0..c {
            let g = self.gamma.value.data()[ch];
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for s in 0..n {
                let base = (s * c + ch) * l;
                for i in base..base + l {
                    sum_dy += dy[i];
                    sum_dy_xhat += dy[i] * cache.xhat[i];
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let k = g * cache.inv_std[ch] / m;
            for s in 0..n {
                let base = (s * c + ch) * l;
                for i in base..base + l {
                    dx.data_mut()[i] = k * (m * dy[i] - sum_dy - cache.xhat[i] * sum_dy_xhat);
                }
            }
        }
        Ok(dx)
    }
}

impl<T: Float> Module<T> for BatchNorm1d<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        vec![("weight".into(), &self.gamma), ("bias".into(), &self.beta)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![("weight".into(), &mut self.gamma), ("bias".into(), &mut self.beta)]
    }

    fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("running_mean".into(), &self.running_mean), ("running_var".into(), &self.running_var)]
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("running_mean".into(), &mut self.running_mean), ("running_var".into(), &mut self.running_var)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_stats_eval_is_identity() {
        let bn = BatchNorm1d::<f64>::new(BatchNormSpec::new(2));
        let x = Tensor::from_vec(&[1, 2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let y = bn.infer(&x).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5 * a.abs().max(1.0));
        }
    }

    #[test]
    fn constant_channel_centers_to_zero() {
        let mut bn = BatchNorm1d::<f64>::new(BatchNormSpec::new(1));
        let y = bn.forward(&Tensor::full(&[3, 1, 4], 7.0), Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!((bn.running_mean.data()[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn empty_train_batch_rejected() {
        let mut bn = BatchNorm1d::<f32>::new(BatchNormSpec::new(3));
        assert!(matches!(bn.forward(&Tensor::zeros(&[0, 3, 8]), Mode::Train), Err(Error::Validation(_))));
    }
}
