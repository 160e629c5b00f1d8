use rand::Rng;

use super::{extract_rep_markers, time_in_rep, ClsModelConfig, MarkerParams, SegModel, SegOutput};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, missing_cache, prefixed, relu, relu_backward, sigmoid,
    sigmoid_backward, BatchNorm1d, BatchNormSpec, Conv1d, Conv1dSpec, Float, Linear, Lstm, LstmSpec, LstmState,
    Mode, Module, Param, Tensor,
};
use crate::signal::Window;
use crate::{CHANNELS, MAX_WINDOWS, WINDOW_LEN};

/// Everything the classifier derives from one window independently of its
/// neighbours. Computing it once per window lets a sliding sequence reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowFeatures<T> {
    pub confidences: Vec<T>,
    /// Window-relative end-of-rep markers.
    pub markers: Vec<usize>,
    /// Projected per-window LSTM input.
    pub projected: Vec<T>,
}

/// A padded batch of window sequences for training. Only the `slots` listed
/// carry data; padding sits after each sequence's last window so causality
/// keeps it from touching real outputs.
#[derive(Debug, Clone)]
pub struct ClsBatch<T> {
    /// `M × 6 × 256` raw windows, one per slot.
    pub raw: Tensor<T>,
    /// `M × (E + 256)` frozen encodings followed by time-in-rep.
    pub seg_features: Tensor<T>,
    /// `(step, sequence)` of each window.
    pub slots: Vec<(usize, usize)>,
    pub steps: usize,
    pub sequences: usize,
}

struct ClsCache<T> {
    skip_out: Tensor<T>,
    skip_len: usize,
    probs: Tensor<T>,
    slots: Vec<(usize, usize)>,
    steps: usize,
    sequences: usize,
}

/// Near-failure classifier: frozen segmentation base, a trainable skip conv
/// on the raw window, a projection and a unidirectional LSTM over windows.
pub struct ClsModel<T: Float> {
    pub config: ClsModelConfig,
    pub markers: MarkerParams,
    pub seg: SegModel<T>,
    pub skip: Conv1d<T>,
    pub skip_bn: BatchNorm1d<T>,
    pub proj: Linear<T>,
    pub lstm: Lstm<T>,
    pub head: Linear<T>,
    cache: Option<ClsCache<T>>,
}

impl<T: Float> Clone for ClsModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            markers: self.markers,
            seg: self.seg.clone(),
            skip: self.skip.clone(),
            skip_bn: self.skip_bn.clone(),
            proj: self.proj.clone(),
            lstm: self.lstm.clone(),
            head: self.head.clone(),
            cache: None,
        }
    }
}

fn window_tensor<T: Float>(windows: &[&Window]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(windows.len() * CHANNELS * WINDOW_LEN);
    for w in windows {
        if w.data.len() != CHANNELS * WINDOW_LEN {
            return Err(Error::validation("window must hold 6×256 values"));
        }
        data.extend(w.data.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec(&[windows.len(), CHANNELS, WINDOW_LEN], data)
}

impl<T: Float> ClsModel<T> {
    /// Wraps `seg` (frozen from here on) with freshly initialized layers.
    pub fn new<R: Rng + ?Sized>(config: ClsModelConfig, mut seg: SegModel<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        seg.set_trainable(false);
        let enc = seg.config.encoding_width();
        let skip = Conv1d::new(Conv1dSpec::new(CHANNELS, config.skip_channels, config.skip_kernel, 1), rng);
        let skip_bn = BatchNorm1d::new(BatchNormSpec::new(config.skip_channels));
        let proj = Linear::new(config.feature_width(enc), config.projection, rng);
        let lstm = Lstm::new(
            LstmSpec { input: config.projection, hidden: config.lstm_hidden, layers: config.lstm_layers },
            rng,
        );
        let head = Linear::new(config.lstm_hidden, 1, rng);
        Ok(Self { config, markers: MarkerParams::default(), seg, skip, skip_bn, proj, lstm, head, cache: None })
    }

    pub fn encoding_width(&self) -> usize {
        self.seg.config.encoding_width()
    }

    pub fn frozen_param_count(&self) -> usize {
        self.param_count() - self.trainable_param_count()
    }

    /// Frozen-base features for a batch: segmentation outputs and, per window,
    /// `[encoding, time_in_rep]` plus the extracted markers.
    pub fn seg_features(&self, x: &Tensor<T>) -> Result<(SegOutput<T>, Tensor<T>, Vec<Vec<usize>>)> {
        let out = self.seg.infer(x)?;
        let n = x.shape()[0];
        let enc = self.encoding_width();
        let width = enc + WINDOW_LEN;
        let mut feats = Vec::with_capacity(n * width);
        let mut all_markers = Vec::with_capacity(n);
        for i in 0..n {
            let conf = &out.confidences.data()[i * WINDOW_LEN..(i + 1) * WINDOW_LEN];
            let markers = extract_rep_markers(conf, self.markers);
            feats.extend_from_slice(&out.encoding.data()[i * enc..(i + 1) * enc]);
            feats.extend(time_in_rep(&markers, WINDOW_LEN)?.into_iter().map(T::of));
            all_markers.push(markers);
        }
        Ok((out, Tensor::from_vec(&[n, width], feats)?, all_markers))
    }

    fn concat(seg_features: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
        let n = seg_features.shape()[0];
        let (a, b) = (seg_features.shape()[1], skip.shape()[1]);
        let mut data = Vec::with_capacity(n * (a + b));
        for i in 0..n {
            data.extend_from_slice(&seg_features.data()[i * a..(i + 1) * a]);
            data.extend_from_slice(&skip.data()[i * b..(i + 1) * b]);
        }
        Tensor::from_vec(&[n, a + b], data)
    }

    /// Eval-mode per-window features for any number of windows.
    pub fn window_features(&self, windows: &[&Window]) -> Result<Vec<WindowFeatures<T>>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let x = window_tensor(windows)?;
        let (out, seg_feats, markers) = self.seg_features(&x)?;
        let skip = global_avg_pool(&relu(&self.skip_bn.infer(&self.skip.infer(&x)?)?))?;
        let projected = self.proj.infer(&Self::concat(&seg_feats, &skip)?)?;
        let p = self.config.projection;
        Ok(markers
            .into_iter()
            .enumerate()
            .map(|(i, markers)| WindowFeatures {
                confidences: out.confidences.data()[i * WINDOW_LEN..(i + 1) * WINDOW_LEN].to_vec(),
                markers,
                projected: projected.data()[i * p..(i + 1) * p].to_vec(),
            })
            .collect())
    }

    /// Runs the recurrent part over projected window features in order.
    /// Returns one confidence per window and the final LSTM state.
    pub fn run_sequence(
        &self,
        projected: &[&[T]],
        state: Option<&LstmState<T>>,
    ) -> Result<(Vec<T>, LstmState<T>)> {
        let p = self.config.projection;
        if projected.iter().any(|v| v.len() != p) {
            return Err(Error::validation("projected feature width mismatch"));
        }
        let steps = projected.len();
        let x = Tensor::from_vec(&[steps, 1, p], projected.concat())?;
        let (h, state) = self.lstm.infer(&x, state)?;
        let h = h.reshape(&[steps, self.config.lstm_hidden])?;
        let conf = sigmoid(&self.head.infer(&h)?).into_data();
        Ok((conf, state))
    }

    /// One confidence per window for a sequence of 1..=32 windows,
    /// optionally continuing from a carried LSTM state.
    pub fn cls_forward(&self, windows: &[Window], state: Option<&LstmState<T>>) -> Result<(Vec<T>, LstmState<T>)> {
        if windows.is_empty() || windows.len() > MAX_WINDOWS {
            return Err(Error::validation(format!(
                "classifier takes 1..={MAX_WINDOWS} windows, got {}",
                windows.len()
            )));
        }
        let refs: Vec<&Window> = windows.iter().collect();
        let feats = self.window_features(&refs)?;
        let proj: Vec<&[T]> = feats.iter().map(|f| f.projected.as_slice()).collect();
        self.run_sequence(&proj, state)
    }

    /// Training forward over a padded batch. Returns one probability per slot.
    pub fn forward_train(&mut self, batch: &ClsBatch<T>) -> Result<Vec<T>> {
        let m = batch.slots.len();
        if m == 0 || batch.raw.shape() != [m, CHANNELS, WINDOW_LEN] || batch.seg_features.shape()[0] != m {
            return Err(Error::validation("classifier batch is empty or inconsistent"));
        }
        let h = self.skip.forward(&batch.raw, Mode::Train)?;
        let skip_out = relu(&self.skip_bn.forward(&h, Mode::Train)?);
        let skip_len = skip_out.shape()[2];
        let pooled = global_avg_pool(&skip_out)?;
        let proj = self.proj.forward(&Self::concat(&batch.seg_features, &pooled)?, Mode::Train)?;
        let p = self.config.projection;
        let (steps, seqs) = (batch.steps, batch.sequences);
        let mut seq_in = Tensor::zeros(&[steps, seqs, p]);
        for (i, &(t, n)) in batch.slots.iter().enumerate() {
            if t >= steps || n >= seqs {
                return Err(Error::validation("classifier batch slot out of range"));
            }
            seq_in.data_mut()[(t * seqs + n) * p..(t * seqs + n + 1) * p]
                .copy_from_slice(&proj.data()[i * p..(i + 1) * p]);
        }
        let (h, _) = self.lstm.forward(&seq_in, None, Mode::Train)?;
        let h = h.reshape(&[steps * seqs, self.config.lstm_hidden])?;
        let probs = sigmoid(&self.head.forward(&h, Mode::Train)?);
        let out = batch.slots.iter().map(|&(t, n)| probs.data()[t * seqs + n]).collect();
        self.cache = Some(ClsCache { skip_out, skip_len, probs, slots: batch.slots.clone(), steps, sequences: seqs });
        Ok(out)
    }

    /// Back-propagates per-slot probability gradients into the trainable layers.
    pub fn backward_train(&mut self, grad: &[T]) -> Result<()> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("classifier"))?;
        if grad.len() != cache.slots.len() {
            return Err(Error::validation("classifier gradient length mismatch"));
        }
        let (steps, seqs) = (cache.steps, cache.sequences);
        let mut g = Tensor::zeros(&[steps * seqs, 1]);
        for (&(t, n), &d) in cache.slots.iter().zip(grad) {
            g.data_mut()[t * seqs + n] = d;
        }
        let g = sigmoid_backward(&cache.probs, &g);
        let g_h = self.head.backward(&g)?.reshape(&[steps, seqs, self.config.lstm_hidden])?;
        let g_in = self.lstm.backward(&g_h)?;
        let p = self.config.projection;
        let mut g_proj = Vec::with_capacity(cache.slots.len() * p);
        for &(t, n) in &cache.slots {
            g_proj.extend_from_slice(&g_in.data()[(t * seqs + n) * p..(t * seqs + n + 1) * p]);
        }
        let g_feat = self.proj.backward(&Tensor::from_vec(&[cache.slots.len(), p], g_proj)?)?;
        let width = g_feat.shape()[1];
        let s = self.config.skip_channels;
        let g_skip: Vec<T> = g_feat.data().chunks(width).flat_map(|row| row[width - s..].iter().copied()).collect();
        let g_skip = global_avg_pool_backward(&Tensor::from_vec(&[cache.slots.len(), s], g_skip)?, cache.skip_len);
        let g_skip = relu_backward(&cache.skip_out, &g_skip);
        self.skip.backward(&self.skip_bn.backward(&g_skip)?)?;
        Ok(())
    }
}

impl<T: Float> Module<T> for ClsModel<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = prefixed("seg", self.seg.named_params());
        v.extend(prefixed("skip.conv", self.skip.named_params()));
        v.extend(prefixed("skip.bn", self.skip_bn.named_params()));
        v.extend(prefixed("proj", self.proj.named_params()));
        v.extend(prefixed("lstm", self.lstm.named_params()));
        v.extend(prefixed("head", self.head.named_params()));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = prefixed("seg", self.seg.named_params_mut());
        v.extend(prefixed("skip.conv", self.skip.named_params_mut()));
        v.extend(prefixed("skip.bn", self.skip_bn.named_params_mut()));
        v.extend(prefixed("proj", self.proj.named_params_mut()));
        v.extend(prefixed("lstm", self.lstm.named_params_mut()));
        v.extend(prefixed("head", self.head.named_params_mut()));
        v
    }

    fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = prefixed("seg", self.seg.named_buffers());
        v.extend(prefixed("skip.bn", self.skip_bn.named_buffers()));
        v
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = prefixed("seg", self.seg.named_buffers_mut());
        v.extend(prefixed("skip.bn", self.skip_bn.named_buffers_mut()));
        v
    }

    fn set_trainable(&mut self, trainable: bool) {
        for (name, p) in self.named_params_mut() {
            if !name.starts_with("seg.") {
                p.trainable = trainable;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::SegModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ClsModel<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seg_cfg =
            SegModelConfig { kernel: 3, stages: 2, blocks: 1, first_channels: 4, last_channels: 8, compact: true };
        let seg = SegModel::new(seg_cfg, &mut rng).unwrap();
        let cfg = ClsModelConfig { skip_channels: 3, skip_kernel: 3, projection: 5, lstm_hidden: 4, lstm_layers: 2 };
        ClsModel::new(cfg, seg, &mut rng).unwrap()
    }

    fn windows(n: usize, seed: u64) -> Vec<Window> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Window { data: (0..1536).map(|_| rng.random_range(-2.0..2.0)).collect() }).collect()
    }

    #[test]
    fn counts_split_frozen_and_trainable() {
        let m = tiny();
        assert_eq!(m.trainable_param_count(), m.config.trainable_param_count(8));
        assert_eq!(m.frozen_param_count(), m.seg.param_count());
    }

    #[test]
    fn window_count_bounds() {
        let m = tiny();
        assert!(matches!(m.cls_forward(&[], None), Err(Error::Validation(_))));
        assert_eq!(m.cls_forward(&windows(1, 1), None).unwrap().0.len(), 1);
        assert!(m.cls_forward(&windows(33, 1), None).is_err());
    }

    #[test]
    fn training_and_inference_paths_agree() {
        let mut m = tiny();
        let ws = windows(5, 3);
        let refs: Vec<&Window> = ws.iter().collect();
        let x = window_tensor(&refs).unwrap();
        // Pin the running statistics to this batch's so both modes normalize alike.
        let h = m.skip.infer(&x).unwrap();
        let (n, c, l) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|s| h.data()[(s * c + ch) * l..(s * c + ch + 1) * l].iter().map(|&v| v as f64)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            m.skip_bn.running_mean.data_mut()[ch] = mean as f32;
            m.skip_bn.running_var.data_mut()[ch] = var as f32;
        }
        let (expected, _) = m.cls_forward(&ws, None).unwrap();
        let (_, seg_features, _) = m.seg_features(&x).unwrap();
        let batch = ClsBatch { raw: x, seg_features, slots: (0..5).map(|t| (t, 0)).collect(), steps: 5, sequences: 1 };
        let got = m.forward_train(&batch).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-4, "{got:?} vs {expected:?}");
        }
    }

    #[test]
    fn prefix_predictions_do_not_see_the_future() {
        let m = tiny();
        let mut ws = windows(6, 2);
        let (a, _) = m.cls_forward(&ws, None).unwrap();
        ws[4].data.iter_mut().for_each(|v| *v += 1.0);
        let (b, _) = m.cls_forward(&ws, None).unwrap();
        assert_eq!(a[..4], b[..4]);
        assert_ne!(a[4], b[4]);
    }
}
