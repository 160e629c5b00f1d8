use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{matmul, missing_cache, Float, Mode, Module, Param, Tensor};
use crate::error::{Error, Result};

/// Shape of a 1D convolution (cross-correlation, zero padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv1dSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl Conv1dSpec {
    /// Kernel-size `kernel`, padding `kernel / 2`, with bias.
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self { in_ch, out_ch, kernel, stride, padding: kernel / 2, bias: true }
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn param_count(&self) -> usize {
        self.in_ch * self.out_ch * self.kernel + if self.bias { self.out_ch } else { 0 }
    }
}

struct ConvCache<T> {
    cols: Vec<T>,
    batch: usize,
    in_len: usize,
    out_len: usize,
}

/// 1D convolution over `N × C_in × L` inputs. Weight layout `(out, in, kernel)`.
pub struct Conv1d<T: Float> {
    pub spec: Conv1dSpec,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    cache: Option<ConvCache<T>>,
}

impl<T: Float> Clone for Conv1d<T> {
    fn clone(&self) -> Self {
        Self { spec: self.spec, weight: self.weight.clone(), bias: self.bias.clone(), cache: None }
    }
}

impl<T: Float> Conv1d<T> {
    pub fn new<R: Rng + ?Sized>(spec: Conv1dSpec, rng: &mut R) -> Self {
        let fan_in = (spec.in_ch * spec.kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = Param::new(Tensor::uniform(&[spec.out_ch, spec.in_ch, spec.kernel], bound, rng));
        let bias = spec.bias.then(|| Param::new(Tensor::uniform(&[spec.out_ch], bound, rng)));
        Self { spec, weight, bias, cache: None }
    }

    /// Builds from explicit weights (`out*in*kernel` values) and bias.
    pub fn from_weights(spec: Conv1dSpec, weight: Vec<T>, bias: Option<Vec<T>>) -> Result<Self> {
        let weight = Param::new(Tensor::from_vec(&[spec.out_ch, spec.in_ch, spec.kernel], weight)?);
        let bias = match (spec.bias, bias) {
            (true, Some(b)) => Some(Param::new(Tensor::from_vec(&[spec.out_ch], b)?)),
            (false, None) => None,
            _ => return Err(Error::validation("conv bias does not match spec")),
        };
        Ok(Self { spec, weight, bias, cache: None })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        x.expect_rank(3, "conv1d")?;
        let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if c != self.spec.in_ch {
            return Err(Error::validation(format!(
                "conv1d expects {} input channels, got {c}",
                self.spec.in_ch
            )));
        }
        if l + 2 * self.spec.padding < self.spec.kernel {
            return Err(Error::validation(format!("conv1d input length {l} shorter than kernel")));
        }
        Ok((n, l))
    }

    /// Unfolds one sample (`C × L`) into `(C·K) × L_out` columns.
    fn im2col(&self, x: &[T], in_len: usize, out_len: usize, cols: &mut [T]) {
        let Conv1dSpec { in_ch, kernel, stride, padding, .. } = self.spec;
        for c in 0..in_ch {
            let xc = &x[c * in_len..(c + 1) * in_len];
            for k in 0..kernel {
                let row = &mut cols[(c * kernel + k) * out_len..(c * kernel + k + 1) * out_len];
                for (o, slot) in row.iter_mut().enumerate() {
                    let pos = (o * stride + k) as isize - padding as isize;
                    *slot = if pos >= 0 && (pos as usize) < in_len { xc[pos as usize] } else { T::zero() };
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], in_len: usize, out_len: usize, dx: &mut [T]) {
        let Conv1dSpec { in_ch, kernel, stride, padding, .. } = self.spec;
        for c in 0..in_ch {
            for k in 0..kernel {
                let row = &cols[(c * kernel + k) * out_len..(c * kernel + k + 1) * out_len];
                for (o, &g) in row.iter().enumerate() {
                    let pos = (o * stride + k) as isize - padding as isize;
                    if pos >= 0 && (pos as usize) < in_len {
                        dx[c * in_len + pos as usize] += g;
                    }
                }
            }
        }
    }

    fn run(&self, x: &Tensor<T>, keep_cols: bool) -> Result<(Tensor<T>, Option<ConvCache<T>>)> {
        let (n, l) = self.check_input(x)?;
        let out_len = self.spec.out_len(l);
        let ck = self.spec.in_ch * self.spec.kernel;
        let co = self.spec.out_ch;
        let mut out = Tensor::zeros(&[n, co, out_len]);
        let mut all_cols = if keep_cols { vec![T::zero(); n * ck * out_len] } else { Vec::new() };
        let mut scratch = if keep_cols { Vec::new() } else { vec![T::zero(); ck * out_len] };

        for s in 0..n {
            let xs = &x.data()[s * self.spec.in_ch * l..(s + 1) * self.spec.in_ch * l];
            let cols: &mut [T] = if keep_cols {
                &mut all_cols[s * ck * out_len..(s + 1) * ck * out_len]
            } else {
                &mut scratch
            };
            self.im2col(xs, l, out_len, cols);
            let ys = &mut out.data_mut()[s * co * out_len..(s + 1) * co * out_len];
            if let Some(b) = &self.bias {
                for (o, &bv) in b.value.data().iter().enumerate() {
                    ys[o * out_len..(o + 1) * out_len].fill(bv);
                }
            }
            let beta = if self.bias.is_some() { T::one() } else { T::zero() };
            matmul(ys, self.weight.value.data(), cols, co, ck, out_len, false, false, beta);
        }
        let cache = keep_cols.then_some(ConvCache { cols: all_cols, batch: n, in_len: l, out_len });
        Ok((out, cache))
    }

    /// Inference forward; never records.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x, false)?.0)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (out, cache) = self.run(x, mode == Mode::Train)?;
        self.cache = cache;
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("conv1d"))?;
        let ConvCache { cols, batch, in_len, out_len } = cache;
        let ck = self.spec.in_ch * self.spec.kernel;
        let co = self.spec.out_ch;
        if grad_out.shape() != [batch, co, out_len] {
            return Err(Error::validation("conv1d backward: gradient shape mismatch"));
        }
        let mut dx = Tensor::zeros(&[batch, self.spec.in_ch, in_len]);
        let mut dcols = vec![T::zero(); ck * out_len];
        for s in 0..batch {
            let dy = &grad_out.data()[s * co * out_len..(s + 1) * co * out_len];
            let cs = &cols[s * ck * out_len..(s + 1) * ck * out_len];
            // dW += dY · colsᵀ
            matmul(&mut self.weight.grad, dy, cs, co, out_len, ck, false, true, T::one());
            if let Some(b) = &mut self.bias {
                for o in 0..co {
                    b.grad[o] += dy[o * out_len..(o + 1) * out_len].iter().copied().sum();
                }
            }
            // dcols = Wᵀ · dY
            matmul(&mut dcols, self.weight.value.data(), dy, ck, co, out_len, true, false, T::zero());
            let dxs = &mut dx.data_mut()[s * self.spec.in_ch * in_len..(s + 1) * self.spec.in_ch * in_len];
            self.col2im(&dcols, in_len, out_len, dxs);
        }
        Ok(dx)
    }
}

impl<T: Float> Module<T> for Conv1d<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = vec![("weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = vec![("weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel_passes_input() {
        let spec = Conv1dSpec { in_ch: 1, out_ch: 1, kernel: 3, stride: 1, padding: 1, bias: true };
        let conv = Conv1d::<f32>::from_weights(spec, vec![0.0, 1.0, 0.0], Some(vec![0.0])).unwrap();
        let x = Tensor::from_vec(&[1, 1, 5], vec![1.0, -2.0, 3.0, 4.5, 0.25]).unwrap();
        assert_eq!(conv.infer(&x).unwrap().data(), x.data());
    }

    #[test]
    fn strided_shape_law() {
        let spec = Conv1dSpec::new(6, 8, 3, 2);
        assert_eq!(spec.out_len(256), 128);
        let conv = Conv1d::<f32>::new(spec, &mut ChaCha8Rng::seed_from_u64(0));
        let y = conv.infer(&Tensor::zeros(&[2, 6, 256])).unwrap();
        assert_eq!(y.shape(), &[2, 8, 128]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let conv = Conv1d::<f32>::new(Conv1dSpec::new(6, 8, 3, 1), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(conv.infer(&Tensor::zeros(&[1, 5, 16])), Err(Error::Validation(_))));
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut conv = Conv1d::<f64>::new(Conv1dSpec::new(1, 1, 3, 1), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(conv.backward(&Tensor::zeros(&[1, 1, 4])), Err(Error::State(_))));
        conv.forward(&Tensor::zeros(&[1, 1, 4]), Mode::Eval).unwrap();
        assert!(matches!(conv.backward(&Tensor::zeros(&[1, 1, 4])), Err(Error::State(_))));
    }
}
