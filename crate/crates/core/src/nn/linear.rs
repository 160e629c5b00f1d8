use rand::Rng;

use super::{matmul, missing_cache, Float, Mode, Module, Param, Tensor};
use crate::error::{Error, Result};

/// Affine map `y = x Wᵀ + b` over `N × F` inputs. Weight layout `(out, in)`.
pub struct Linear<T: Float> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Float> Clone for Linear<T> {
    fn clone(&self) -> Self {
        Self {
            in_features: self.in_features,
            out_features: self.out_features,
            weight: self.weight.clone(),
            bias: self.bias.clone(),
            cache: None,
        }
    }
}

impl<T: Float> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Self {
            in_features,
            out_features,
            weight: Param::new(Tensor::uniform(&[out_features, in_features], bound, rng)),
            bias: Param::new(Tensor::uniform(&[out_features], bound, rng)),
            cache: None,
        }
    }

    pub fn from_weights(in_features: usize, out_features: usize, weight: Vec<T>, bias: Vec<T>) -> Result<Self> {
        Ok(Self {
            in_features,
            out_features,
            weight: Param::new(Tensor::from_vec(&[out_features, in_features], weight)?),
            bias: Param::new(Tensor::from_vec(&[out_features], bias)?),
            cache: None,
        })
    }

    pub fn param_count(in_features: usize, out_features: usize) -> usize {
        in_features * out_features + out_features
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_rank(2, "linear")?;
        let (n, f) = (x.shape()[0], x.shape()[1]);
        if f != self.in_features {
            return Err(Error::validation(format!(
                "linear expects {} features, got {f}",
                self.in_features
            )));
        }
        let g = self.out_features;
        let mut out = Tensor::zeros(&[n, g]);
        for row in out.data_mut().chunks_mut(g) {
            row.copy_from_slice(self.bias.value.data());
        }
        matmul(out.data_mut(), x.data(), self.weight.value.data(), n, f, g, false, true, T::one());
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let out = self.infer(x)?;
        self.cache = (mode == Mode::Train).then(|| x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(|| missing_cache("linear"))?;
        let n = x.shape()[0];
        let (f, g) = (self.in_features, self.out_features);
        if grad_out.shape() != [n, g] {
            return Err(Error::validation("linear backward: gradient shape mismatch"));
        }
        // dW += dYᵀ · X
        matmul(&mut self.weight.grad, grad_out.data(), x.data(), g, n, f, true, false, T::one());
        for row in grad_out.data().chunks(g) {
            for (b, &d) in self.bias.grad.iter_mut().zip(row) {
                *b += d;
            }
        }
        let mut dx = Tensor::zeros(&[n, f]);
        matmul(dx.data_mut(), grad_out.data(), self.weight.value.data(), n, g, f, false, false, T::zero());
        Ok(dx)
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_bias_only() {
        let eye = Linear::<f32>::from_weights(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], vec![0.; 3]).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![1., 2., 3., -4., 5., 0.5]).unwrap();
        assert_eq!(eye.infer(&x).unwrap().data(), x.data());

        let b = Linear::<f32>::from_weights(3, 2, vec![0.; 6], vec![0.5, -1.0]).unwrap();
        assert_eq!(b.infer(&x).unwrap().data(), &[0.5, -1.0, 0.5, -1.0]);
        assert!(b.infer(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn weight_gradient_is_upstream_t_input() {
        let mut l = Linear::<f64>::from_weights(2, 1, vec![0.3, -0.2], vec![0.1]).unwrap();
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        l.forward(&x, Mode::Train).unwrap();
        let dy = Tensor::from_vec(&[2, 1], vec![0.5, -1.0]).unwrap();
        let dx = l.backward(&dy).unwrap();
        assert_eq!(l.weight.grad, vec![0.5 - 3.0, 1.0 - 4.0]);
        assert_eq!(l.bias.grad, vec![-0.5]);
        assert_eq!(dx.data(), &[0.15, -0.1, -0.3, 0.2]);
    }
}
