//! Training loops for the segmentation network and the near-failure
//! classifier, with best-checkpoint early stopping.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    augment_window, extract_windows, label_window, near_failure_label, rir_per_point, RirTrace, WindowingParams,
};
use crate::error::{Error, Result};
use crate::eval::{binary_metrics, mean};
use crate::models::{ClsBatch, ClsModel, ClsModelConfig, SegModel, SegModelConfig};
use crate::nn::{bce_loss, combined_seg_loss, AdamW, AdamWConfig, Mode, Module, Tensor};
use crate::session::Session;
use crate::signal::{preprocess, PreprocessOptions, UniformSeries};
use crate::{CHANNELS, WINDOW_LEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_seg: f64,
    pub lr_cls: f64,
    /// Windows per segmentation step.
    pub batch: usize,
    /// Sequences per classifier step.
    pub cls_batch: usize,
    pub max_epochs: usize,
    /// Classifier epochs; defaults to `max_epochs` when absent.
    pub cls_max_epochs: Option<usize>,
    pub patience: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Cap on segmentation windows drawn per epoch (all when absent).
    pub windows_per_epoch: Option<usize>,
    /// Window stride for per-epoch segmentation validation.
    pub val_stride: usize,
    /// Share of sessions used for fitting; the rest drive early stopping.
    pub train_fraction: f64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_seg: 4.3e-3,
            lr_cls: 7.9e-4,
            batch: 128,
            cls_batch: 128,
            max_epochs: 50,
            cls_max_epochs: None,
            patience: 15,
            alpha: 0.8,
            seed: 0,
            windows_per_epoch: None,
            val_stride: 2,
            train_fraction: 0.8,
            augment: true,
        }
    }
}

impl TrainConfig {
    /// Settings that train the compact models on a single desktop core.
    pub fn desk() -> Self {
        Self {
            cls_batch: 16,
            max_epochs: 30,
            cls_max_epochs: Some(60),
            patience: 20,
            windows_per_epoch: Some(4096),
            val_stride: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_seg, self.lr_cls, self.alpha, self.train_fraction];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::validation("learning rates, alpha and train fraction must be positive"));
        }
        if self.alpha > 1.0 || self.train_fraction >= 1.0 {
            return Err(Error::validation("alpha must be at most 1 and train fraction below 1"));
        }
        if self.batch == 0 || self.cls_batch == 0 || self.max_epochs == 0 || self.patience == 0 || self.val_stride == 0 {
            return Err(Error::validation("batch sizes, epochs, patience and stride must be positive"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::validation("patience exceeds max epochs"));
        }
        if self.windows_per_epoch == Some(0) || self.cls_max_epochs == Some(0) {
            return Err(Error::validation("epoch sizes must be positive"));
        }
        Ok(())
    }

    pub fn cls_epochs(&self) -> usize {
        self.cls_max_epochs.unwrap_or(self.max_epochs)
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl HistoryRecord {
    fn new(epoch: usize, split: &str, metric: &str, value: f64) -> Self {
        Self { epoch, split: split.into(), metric: metric.into(), value }
    }
}

pub fn write_history<W: Write>(history: &[HistoryRecord], mut sink: W) -> Result<()> {
    for r in history {
        serde_json::to_writer(&mut sink, r).map_err(|e| Error::Io(e.into()))?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

/// A preprocessed, labelled session.
#[derive(Debug, Clone)]
pub struct PreparedSession {
    pub id: usize,
    pub series: UniformSeries,
    pub rir: RirTrace,
}

impl PreparedSession {
    pub fn from_series(id: usize, series: UniformSeries) -> Result<Self> {
        let rir = rir_per_point(&series)?;
        Ok(Self { id, series, rir })
    }

    pub fn from_session(id: usize, session: &Session) -> Result<Self> {
        Self::from_series(id, preprocess(session, PreprocessOptions::for_session(session))?)
    }
}

pub struct TrainOutcome<M> {
    pub model: M,
    pub history: Vec<HistoryRecord>,
    pub best_epoch: usize,
    pub best_f1: f64,
    pub epochs_run: usize,
}

/// Keeps the best-scoring snapshot and decides when to stop.
struct EarlyStop<M> {
    patience: usize,
    best: Option<(M, usize, f64)>,
    since_best: usize,
}

impl<M: Clone> EarlyStop<M> {
    fn new(patience: usize) -> Self {
        Self { patience, best: None, since_best: 0 }
    }

    /// Records an epoch; returns true when training should stop.
    fn observe(&mut self, model: &M, epoch: usize, f1: f64) -> bool {
        if self.best.as_ref().is_none_or(|(_, _, b)| f1 > *b) {
            self.best = Some((model.clone(), epoch, f1));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }
}

fn check_loss(loss: f32) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::state("training diverged: non-finite loss"))
    }
}

/// Mean per-session F1 of segmentation on unaugmented windows at `stride`.
pub fn seg_validation_f1(model: &SegModel<f32>, sessions: &[PreparedSession], stride: usize) -> Result<f64> {
    let mut f1s = Vec::with_capacity(sessions.len());
    for s in sessions {
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        let starts = extract_windows(s.series.len(), WINDOW_LEN, stride);
        for chunk in starts.chunks(64) {
            let mut data = Vec::with_capacity(chunk.len() * CHANNELS * WINDOW_LEN);
            for &st in chunk {
                let lw = label_window(&s.series, None, s.id, st);
                data.extend_from_slice(&lw.window.data);
                truth.extend(lw.seg_labels.iter().map(|&l| l == 1));
            }
            let out = model.infer(&Tensor::from_vec(&[chunk.len(), CHANNELS, WINDOW_LEN], data)?)?;
            pred.extend(out.confidences.data().iter().map(|&c| c >= 0.5));
        }
        f1s.push(binary_metrics(&pred, &truth)?.f1);
    }
    Ok(mean(&f1s))
}

pub fn train_segmentation(
    train: &[PreparedSession],
    val: &[PreparedSession],
    model_cfg: &SegModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<SegModel<f32>>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::validation("empty training split"));
    }
    if val.is_empty() {
        return Err(Error::validation("empty validation split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = SegModel::<f32>::new(model_cfg.clone(), &mut rng)?;
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr_seg));
    let params = WindowingParams::default();
    let mut pool: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(i, s)| extract_windows(s.series.len(), WINDOW_LEN, params.train_stride).into_iter().map(move |st| (i, st)))
        .collect();
    if pool.is_empty() {
        return Err(Error::validation("training sessions are shorter than one window"));
    }
    let mut history = Vec::new();
    let mut stop = EarlyStop::new(cfg.patience);
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        pool.shuffle(&mut rng);
        let take = cfg.windows_per_epoch.map_or(pool.len(), |n| n.min(pool.len()));
        let mut losses = Vec::new();
        for chunk in pool[..take].chunks(cfg.batch) {
            let n = chunk.len();
            let mut x = Vec::with_capacity(n * CHANNELS * WINDOW_LEN);
            let mut y = Vec::with_capacity(n * WINDOW_LEN);
            for &(i, st) in chunk {
                let s = &train[i];
                let lw = if cfg.augment {
                    augment_window(&s.series, Some(&s.rir), s.id, st, &mut rng)
                } else {
                    label_window(&s.series, Some(&s.rir), s.id, st)
                };
                x.extend_from_slice(&lw.window.data);
                y.extend(lw.seg_labels.iter().map(|&l| l as f32));
            }
            let x = Tensor::from_vec(&[n, CHANNELS, WINDOW_LEN], x)?;
            let y = Tensor::from_vec(&[n, WINDOW_LEN], y)?;
            model.zero_grad();
            let out = model.forward(&x, Mode::Train)?;
            let (loss, grad) = combined_seg_loss(&out.confidences, &y, cfg.alpha)?;
            check_loss(loss)?;
            model.backward(&grad)?;
            opt.step(&mut model);
            losses.push(loss as f64);
        }
        let train_loss = mean(&losses);
        let f1 = seg_validation_f1(&model, val, cfg.val_stride)?;
        log::info!("seg epoch {epoch}: loss {train_loss:.5} val f1 {f1:.4}");
        history.push(HistoryRecord::new(epoch, "train", "loss", train_loss));
        history.push(HistoryRecord::new(epoch, "val", "f1", f1));
        epochs_run = epoch;
        if stop.observe(&model, epoch, f1) {
            break;
        }
    }
    let (model, best_epoch, best_f1) = stop.best.expect("at least one epoch");
    Ok(TrainOutcome { model, history, best_epoch, best_f1, epochs_run })
}

/// Start index and window count of each training sequence: full 32-window
/// sequences every 64 samples, or one shorter sequence from 0 when the
/// series cannot hold a full one.
pub fn make_sequence_batches(len: usize, params: &WindowingParams) -> Vec<(usize, usize)> {
    if len < params.window {
        return Vec::new();
    }
    let span = params.sequence_span();
    if len < span {
        return vec![(0, (len - params.window) / params.infer_stride + 1)];
    }
    (0..=(len - span) / params.infer_stride).map(|k| (k * params.infer_stride, params.max_windows)).collect()
}

/// Stride-64 windows of one session with frozen-base features and labels.
struct SessionWindows {
    raw: Vec<f32>,
    seg_features: Vec<f32>,
    labels: Vec<bool>,
    sequences: Vec<(usize, usize)>,
}

fn session_windows(model: &ClsModel<f32>, s: &PreparedSession) -> Result<SessionWindows> {
    let params = WindowingParams::default();
    let starts = extract_windows(s.series.len(), WINDOW_LEN, params.infer_stride);
    let mut raw = Vec::with_capacity(starts.len() * CHANNELS * WINDOW_LEN);
    let mut seg_features = Vec::new();
    for chunk in starts.chunks(64) {
        let mut x = Vec::with_capacity(chunk.len() * CHANNELS * WINDOW_LEN);
        for &st in chunk {
            x.extend_from_slice(&s.series.window(st).data);
        }
        let x = Tensor::from_vec(&[chunk.len(), CHANNELS, WINDOW_LEN], x)?;
        let (_, feats, _) = model.seg_features(&x)?;
        seg_features.extend_from_slice(feats.data());
        raw.extend_from_slice(x.data());
    }
    let labels = starts.iter().map(|&st| near_failure_label(&s.rir, st, WINDOW_LEN)).collect();
    let sequences = make_sequence_batches(s.series.len(), &params)
        .into_iter()
        .map(|(start, count)| (start / params.infer_stride, count))
        .collect();
    Ok(SessionWindows { raw, seg_features, labels, sequences })
}

/// Assembles sequences `(session, first window, count)` into a padded batch.
fn build_batch(data: &[SessionWindows], seqs: &[(usize, usize, usize)], seg_width: usize) -> Result<(ClsBatch<f32>, Vec<f32>)> {
    let steps = seqs.iter().map(|s| s.2).max().unwrap_or(0);
    let win = CHANNELS * WINDOW_LEN;
    let (mut raw, mut feats, mut slots, mut labels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (n, &(si, first, count)) in seqs.iter().enumerate() {
        let d = &data[si];
        for t in 0..count {
            let w = first + t;
            raw.extend_from_slice(&d.raw[w * win..(w + 1) * win]);
            feats.extend_from_slice(&d.seg_features[w * seg_width..(w + 1) * seg_width]);
            slots.push((t, n));
            labels.push(if d.labels[w] { 1.0 } else { 0.0 });
        }
    }
    let m = slots.len();
    Ok((
        ClsBatch {
            raw: Tensor::from_vec(&[m, CHANNELS, WINDOW_LEN], raw)?,
            seg_features: Tensor::from_vec(&[m, seg_width], feats)?,
            slots,
            steps,
            sequences: seqs.len(),
        },
        labels,
    ))
}

fn flatten_sequences(data: &[SessionWindows]) -> Vec<(usize, usize, usize)> {
    data.iter()
        .enumerate()
        .flat_map(|(i, d)| d.sequences.iter().map(move |&(first, count)| (i, first, count)))
        .collect()
}

/// Mean per-session F1 of every per-window prediction of every sequence.
fn cls_validation_f1(model: &ClsModel<f32>, data: &[SessionWindows]) -> Result<f64> {
    let seg_width = model.encoding_width() + WINDOW_LEN;
    let p = model.config.projection;
    let mut f1s = Vec::with_capacity(data.len());
    for d in data {
        let n_win = d.labels.len();
        let x = Tensor::from_vec(&[n_win, CHANNELS, WINDOW_LEN], d.raw.clone())?;
        let skip = crate::nn::global_avg_pool(&crate::nn::relu(&model.skip_bn.infer(&model.skip.infer(&x)?)?))?;
        let mut feats = Vec::with_capacity(n_win * (seg_width + skip.shape()[1]));
        let s = skip.shape()[1];
        for w in 0..n_win {
            feats.extend_from_slice(&d.seg_features[w * seg_width..(w + 1) * seg_width]);
            feats.extend_from_slice(&skip.data()[w * s..(w + 1) * s]);
        }
        let proj = model.proj.infer(&Tensor::from_vec(&[n_win, seg_width + s], feats)?)?;
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for &(first, count) in &d.sequences {
            let rows: Vec<&[f32]> = (first..first + count).map(|w| &proj.data()[w * p..(w + 1) * p]).collect();
            let (conf, _) = model.run_sequence(&rows, None)?;
            pred.extend(conf.iter().map(|&c| c >= 0.5));
            truth.extend_from_slice(&d.labels[first..first + count]);
        }
        f1s.push(binary_metrics(&pred, &truth)?.f1);
    }
    Ok(mean(&f1s))
}

fn frozen_snapshot(model: &ClsModel<f32>) -> Vec<u32> {
    model
        .named_params()
        .into_iter()
        .filter(|(_, p)| !p.trainable)
        .flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .chain(model.seg.named_buffers().into_iter().flat_map(|(_, b)| b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect()
}

pub fn train_classification(
    train: &[PreparedSession],
    val: &[PreparedSession],
    seg: &SegModel<f32>,
    model_cfg: &ClsModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<ClsModel<f32>>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::validation("empty training or validation split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_C1A5);
    let mut model = ClsModel::new(model_cfg.clone(), seg.clone(), &mut rng)?;
    let frozen = frozen_snapshot(&model);
    let seg_width = model.encoding_width() + WINDOW_LEN;
    let train_data = train.iter().map(|s| session_windows(&model, s)).collect::<Result<Vec<_>>>()?;
    let val_data = val.iter().map(|s| session_windows(&model, s)).collect::<Result<Vec<_>>>()?;
    let mut sequences = flatten_sequences(&train_data);
    if sequences.is_empty() {
        return Err(Error::validation("training sessions are shorter than one window"));
    }
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr_cls));
    let mut history = Vec::new();
    let mut stop = EarlyStop::new(cfg.patience.min(cfg.cls_epochs()));
    let mut epochs_run = 0;
    for epoch in 1..=cfg.cls_epochs() {
        sequences.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in sequences.chunks(cfg.cls_batch) {
            let (batch, labels) = build_batch(&train_data, chunk, seg_width)?;
            model.zero_grad();
            let probs = model.forward_train(&batch)?;
            let n = probs.len();
            let (loss, grad) =
                bce_loss(&Tensor::from_vec(&[n], probs)?, &Tensor::from_vec(&[n], labels)?)?;
            check_loss(loss)?;
            model.backward_train(grad.data())?;
            opt.step(&mut model);
            losses.push(loss as f64);
        }
        if frozen_snapshot(&model) != frozen {
            return Err(Error::state("frozen segmentation weights changed during training"));
        }
        let train_loss = mean(&losses);
        let f1 = cls_validation_f1(&model, &val_data)?;
        log::info!("cls epoch {epoch}: loss {train_loss:.5} val f1 {f1:.4}");
        history.push(HistoryRecord::new(epoch, "train", "loss", train_loss));
        history.push(HistoryRecord::new(epoch, "val", "f1", f1));
        epochs_run = epoch;
        if stop.observe(&model, epoch, f1) {
            break;
        }
    }
    let (model, best_epoch, best_f1) = stop.best.expect("at least one epoch");
    Ok(TrainOutcome { model, history, best_epoch, best_f1, epochs_run })
}

/// Runs `steps` classifier updates on a single fixed sequence; returns the
/// loss after each step.
pub fn overfit_single_sequence(
    model: &mut ClsModel<f32>,
    session: &PreparedSession,
    steps: usize,
    lr: f64,
) -> Result<Vec<f32>> {
    let data = vec![session_windows(model, session)?];
    let &(first, count) = data[0].sequences.first().ok_or_else(|| Error::validation("session too short"))?;
    let (batch, labels) = build_batch(&data, &[(0, first, count)], model.encoding_width() + WINDOW_LEN)?;
    let mut opt = AdamW::new(AdamWConfig::with_lr(lr));
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        model.zero_grad();
        let probs = model.forward_train(&batch)?;
        let n = probs.len();
        let (loss, grad) = bce_loss(&Tensor::from_vec(&[n], probs)?, &Tensor::from_vec(&[n], labels.clone())?)?;
        model.backward_train(grad.data())?;
        opt.step(model);
        out.push(loss);
    }
    Ok(out)
}
