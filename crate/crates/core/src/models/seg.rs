use rand::Rng;

use super::{SegModelConfig, BLOCK_KERNEL};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, missing_cache, prefixed, relu, relu_backward, sigmoid,
    sigmoid_backward, BatchNorm1d, BatchNormSpec, Conv1d, Conv1dSpec, Float, Linear, Mode, Module, Param, Tensor,
};
use crate::signal::Window;
use crate::{CHANNELS, WINDOW_LEN};

fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    out
}

/// `relu(bn(conv(x)) + shortcut(x))`, with a 1×1 conv + BN shortcut when
/// the width or stride changes.
pub struct ResBlock<T: Float> {
    pub conv: Conv1d<T>,
    pub bn: BatchNorm1d<T>,
    pub proj: Option<(Conv1d<T>, BatchNorm1d<T>)>,
    out: Option<Tensor<T>>,
}

impl<T: Float> Clone for ResBlock<T> {
    fn clone(&self) -> Self {
        Self { conv: self.conv.clone(), bn: self.bn.clone(), proj: self.proj.clone(), out: None }
    }
}

impl<T: Float> ResBlock<T> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let conv = Conv1d::new(Conv1dSpec::new(in_ch, out_ch, BLOCK_KERNEL, stride), rng);
        let proj = (in_ch != out_ch || stride != 1).then(|| {
            let spec = Conv1dSpec { in_ch, out_ch, kernel: 1, stride, padding: 0, bias: true };
            (Conv1d::new(spec, rng), BatchNorm1d::new(BatchNormSpec::new(out_ch)))
        });
        Self { conv, bn: BatchNorm1d::new(BatchNormSpec::new(out_ch)), proj, out: None }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let main = self.bn.infer(&self.conv.infer(x)?)?;
        let short = match &self.proj {
            Some((c, b)) => b.infer(&c.infer(x)?)?,
            None => x.clone(),
        };
        Ok(relu(&add(&main, &short)))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.conv.forward(x, mode)?;
        let main = self.bn.forward(&h, mode)?;
        let short = match &mut self.proj {
            Some((c, b)) => {
                let h = c.forward(x, mode)?;
                b.forward(&h, mode)?
            }
            None => x.clone(),
        };
        let y = relu(&add(&main, &short));
        self.out = (mode == Mode::Train).then(|| y.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.out.take().ok_or_else(|| missing_cache("resblock"))?;
        let g = relu_backward(&y, grad);
        let dx_main = self.conv.backward(&self.bn.backward(&g)?)?;
        let dx_short = match &mut self.proj {
            Some((c, b)) => c.backward(&b.backward(&g)?)?,
            None => g,
        };
        Ok(add(&dx_main, &dx_short))
    }
}

impl<T: Float> Module<T> for ResBlock<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = prefixed("conv", self.conv.named_params());
        v.extend(prefixed("bn", self.bn.named_params()));
        if let Some((c, b)) = &self.proj {
            v.extend(prefixed("proj.conv", c.named_params()));
            v.extend(prefixed("proj.bn", b.named_params()));
        }
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = prefixed("conv", self.conv.named_params_mut());
        v.extend(prefixed("bn", self.bn.named_params_mut()));
        if let Some((c, b)) = &mut self.proj {
            v.extend(prefixed("proj.conv", c.named_params_mut()));
            v.extend(prefixed("proj.bn", b.named_params_mut()));
        }
        v
    }

    fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = prefixed("bn", self.bn.named_buffers());
        if let Some((_, b)) = &self.proj {
            v.extend(prefixed("proj.bn", b.named_buffers()));
        }
        v
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = prefixed("bn", self.bn.named_buffers_mut());
        if let Some((_, b)) = &mut self.proj {
            v.extend(prefixed("proj.bn", b.named_buffers_mut()));
        }
        v
    }
}

/// Per-window outputs of the segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput<T> {
    /// `N × 256` end-of-rep confidences.
    pub confidences: Tensor<T>,
    /// `N × E` pooled base features.
    pub encoding: Tensor<T>,
}

struct SegCache<T> {
    stem_out: Tensor<T>,
    pooled_len: usize,
    probs: Tensor<T>,
}

/// Residual CNN mapping a 6×256 window to 256 per-point confidences.
pub struct SegModel<T: Float> {
    pub config: SegModelConfig,
    pub stem: Conv1d<T>,
    pub stem_bn: BatchNorm1d<T>,
    pub blocks: Vec<ResBlock<T>>,
    pub head: Linear<T>,
    cache: Option<SegCache<T>>,
}

impl<T: Float> Clone for SegModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            stem: self.stem.clone(),
            stem_bn: self.stem_bn.clone(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
            cache: None,
        }
    }
}

impl<T: Float> SegModel<T> {
    pub fn new<R: Rng + ?Sized>(config: SegModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ch = config.stage_channels();
        let stem = Conv1d::new(Conv1dSpec::new(CHANNELS, ch[0], config.kernel, 1), rng);
        let stem_bn = BatchNorm1d::new(BatchNormSpec::new(ch[0]));
        let mut blocks = Vec::new();
        let mut prev = ch[0];
        for &c in &ch {
            for b in 0..config.blocks {
                blocks.push(ResBlock::new(prev, c, if b == 0 { 2 } else { 1 }, rng));
                prev = c;
            }
        }
        let head = Linear::new(config.encoding_width(), WINDOW_LEN, rng);
        Ok(Self { config, stem, stem_bn, blocks, head, cache: None })
    }

    fn check_input(x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[1] != CHANNELS || s[2] != WINDOW_LEN {
            return Err(Error::validation(format!(
                "segmentation input must be N×{CHANNELS}×{WINDOW_LEN}, got {s:?}"
            )));
        }
        Ok(())
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<SegOutput<T>> {
        Self::check_input(x)?;
        let mut h = relu(&self.stem_bn.infer(&self.stem.infer(x)?)?);
        for b in &self.blocks {
            h = b.infer(&h)?;
        }
        let encoding = global_avg_pool(&h)?;
        let confidences = sigmoid(&self.head.infer(&encoding)?);
        Ok(SegOutput { confidences, encoding })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<SegOutput<T>> {
        if mode == Mode::Eval {
            self.cache = None;
            return self.infer(x);
        }
        Self::check_input(x)?;
        let h = self.stem.forward(x, mode)?;
        let stem_out = relu(&self.stem_bn.forward(&h, mode)?);
        let mut h = stem_out.clone();
        for b in &mut self.blocks {
            h = b.forward(&h, mode)?;
        }
        let pooled_len = h.shape()[2];
        let encoding = global_avg_pool(&h)?;
        let confidences = sigmoid(&self.head.forward(&encoding, mode)?);
        self.cache = Some(SegCache { stem_out, pooled_len, probs: confidences.clone() });
        Ok(SegOutput { confidences, encoding })
    }

    /// Back-propagates a gradient on the confidences; returns the input gradient.
    pub fn backward(&mut self, grad_conf: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("segmentation model"))?;
        let g = sigmoid_backward(&cache.probs, grad_conf);
        let g_enc = self.head.backward(&g)?;
        let mut g = global_avg_pool_backward(&g_enc, cache.pooled_len);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        let g = relu_backward(&cache.stem_out, &g);
        self.stem.backward(&self.stem_bn.backward(&g)?)
    }

    /// Single-window eval pass: `(256 confidences, encoding)`.
    pub fn seg_forward(&self, window: &Window) -> Result<(Vec<T>, Vec<T>)> {
        if window.data.len() != CHANNELS * WINDOW_LEN {
            return Err(Error::validation("window must hold 6×256 values"));
        }
        let x = Tensor::from_vec(&[1, CHANNELS, WINDOW_LEN], window.data.iter().map(|&v| T::of(v as f64)).collect())?;
        let out = self.infer(&x)?;
        Ok((out.confidences.into_data(), out.encoding.into_data()))
    }
}

impl<T: Float> Module<T> for SegModel<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = prefixed("stem.conv", self.stem.named_params());
        v.extend(prefixed("stem.bn", self.stem_bn.named_params()));
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(prefixed(&format!("blocks.{i}"), b.named_params()));
        }
        v.extend(prefixed("head", self.head.named_params()));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = prefixed("stem.conv", self.stem.named_params_mut());
        v.extend(prefixed("stem.bn", self.stem_bn.named_params_mut()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(prefixed(&format!("blocks.{i}"), b.named_params_mut()));
        }
        v.extend(prefixed("head", self.head.named_params_mut()));
        v
    }

    fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = prefixed("stem.bn", self.stem_bn.named_buffers());
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(prefixed(&format!("blocks.{i}"), b.named_buffers()));
        }
        v
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = prefixed("stem.bn", self.stem_bn.named_buffers_mut());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(prefixed(&format!("blocks.{i}"), b.named_buffers_mut()));
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> SegModelConfig {
        SegModelConfig { kernel: 5, stages: 3, blocks: 2, first_channels: 4, last_channels: 8, compact: true }
    }

    #[test]
    fn counted_equals_analytic() {
        let m = SegModel::<f32>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.param_count(), tiny().param_count());
    }

    #[test]
    fn output_shapes_and_range() {
        let m = SegModel::<f32>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::uniform(&[2, 6, 256], 3.0, &mut ChaCha8Rng::seed_from_u64(1));
        let out = m.infer(&x).unwrap();
        assert_eq!(out.confidences.shape(), &[2, 256]);
        assert_eq!(out.encoding.shape(), &[2, 8]);
        assert!(out.confidences.data().iter().all(|&c| c > 0.0 && c < 1.0));
        assert_eq!(m.infer(&x).unwrap(), out);
    }

    #[test]
    fn wrong_shape_rejected() {
        let m = SegModel::<f32>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(m.infer(&Tensor::zeros(&[1, 6, 128])), Err(Error::Validation(_))));
    }
}
