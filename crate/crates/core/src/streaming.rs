//! Live inference: sample ingestion into overlapping windows, one classifier
//! tick per completed window, and latency benchmarking.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ClsModel, WindowFeatures};
use crate::session::RawSample;
use crate::signal::{remap_watch_axes, OnlineResampler, PreprocessOptions, StreamingSmoother, Window};
use crate::{CHANNELS, INFER_STRIDE, MAX_WINDOWS, WINDOW_LEN};

/// Confidence at or above which a tick is flagged near failure.
pub const FLAG_THRESHOLD: f32 = 0.5;
/// A detected marker is new when it lies this far past the last one reported.
pub const MARKER_SEPARATION: usize = INFER_STRIDE;
/// Inferences per window count dropped before timing.
pub const BENCH_WARMUP: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEvent {
    pub tick: u64,
    /// Milliseconds since the Unix epoch when the tick finished.
    pub wall_time_ms: f64,
    pub windows_used: usize,
    pub confidence: f32,
    pub near_failure: bool,
    /// Absolute sample indices of newly detected rep ends.
    pub new_markers: Vec<usize>,
    pub latency_ms: f64,
    /// Sample index one past the newest window.
    pub end_index: usize,
}

/// Recent samples, completed windows awaiting inference, and cached
/// features of the up to 32 most recent inferred windows.
#[derive(Debug, Clone, Default)]
pub struct WindowBuffer {
    recent: VecDeque<[f64; CHANNELS]>,
    total: usize,
    pending: VecDeque<(usize, Window)>,
    features: VecDeque<WindowFeatures<f32>>,
    starts: VecDeque<usize>,
    next_tick: u64,
    last_marker: Option<usize>,
}

impl WindowBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Samples seen so far.
    pub fn samples_seen(&self) -> usize {
        self.total
    }

    /// Inferred windows currently held (at most 32).
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Completed windows not yet inferred.
    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn next_tick(&self) -> u64 {
        self.next_tick
    }

    /// Start indices of the held windows, oldest first.
    pub fn window_starts(&self) -> impl Iterator<Item = usize> + '_ {
        self.starts.iter().copied()
    }

    pub fn features(&self) -> impl Iterator<Item = &WindowFeatures<f32>> {
        self.features.iter()
    }

    /// Appends preprocessed samples; returns how many windows they completed.
    pub fn push_samples(&mut self, samples: &[[f64; CHANNELS]]) -> usize {
        let mut completed = 0;
        for s in samples {
            if self.recent.len() == WINDOW_LEN {
                self.recent.pop_front();
            }
            self.recent.push_back(*s);
            self.total += 1;
            if self.total >= WINDOW_LEN && (self.total - WINDOW_LEN) % INFER_STRIDE == 0 {
                let rows: Vec<[f64; CHANNELS]> = self.recent.iter().copied().collect();
                let window = Window::from_rows(&rows).expect("ring holds one window");
                self.pending.push_back((self.total - WINDOW_LEN, window));
                completed += 1;
            }
        }
        completed
    }

    /// Adds an already-featurized window, evicting beyond 32.
    pub fn push_features(&mut self, f: WindowFeatures<f32>) {
        let start = self.starts.back().map_or(0, |s| s + INFER_STRIDE);
        self.push_features_at(start, f);
    }

    fn push_features_at(&mut self, start: usize, f: WindowFeatures<f32>) {
        if self.features.len() == MAX_WINDOWS {
            self.features.pop_front();
            self.starts.pop_front();
        }
        self.features.push_back(f);
        self.starts.push_back(start);
    }
}

/// Runs inference on the oldest pending window and classifies the sequence
/// of held windows, reporting the newest window's confidence.
pub fn tick_infer(buffer: &mut WindowBuffer, model: &ClsModel<f32>) -> Result<PredictionEvent> {
    let t0 = Instant::now();
    let (start, window) =
        buffer.pending.pop_front().ok_or_else(|| Error::state("no complete window awaiting inference"))?;
    let f = model.window_features(&[&window])?.pop().expect("one window in, one out");
    let mut new_markers = Vec::new();
    for &m in &f.markers {
        let abs = start + m;
        if buffer.last_marker.is_none_or(|last| abs > last + MARKER_SEPARATION) {
            new_markers.push(abs);
            buffer.last_marker = Some(abs);
        }
    }
    buffer.push_features_at(start, f);
    let confidence = StreamingEngine::classify(model, buffer)?;
    let tick = buffer.next_tick;
    buffer.next_tick += 1;
    let wall_time_ms = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64() * 1000.0);
    Ok(PredictionEvent {
        tick,
        wall_time_ms,
        windows_used: buffer.len(),
        confidence,
        near_failure: confidence >= FLAG_THRESHOLD,
        new_markers,
        latency_ms: t0.elapsed().as_secs_f64() * 1000.0,
        end_index: start + WINDOW_LEN,
    })
}

/// A buffer bound to a model. `group > 1` models a transport that delivers
/// windows in batches: ticks wait until `group` windows are pending.
pub struct StreamingEngine {
    model: Arc<ClsModel<f32>>,
    buffer: WindowBuffer,
    group: usize,
}

impl StreamingEngine {
    pub fn new(model: Arc<ClsModel<f32>>) -> Self {
        Self { model, buffer: WindowBuffer::new(), group: 1 }
    }

    pub fn with_group(mut self, group: usize) -> Self {
        self.group = group.max(1);
        self
    }

    pub fn buffer(&self) -> &WindowBuffer {
        &self.buffer
    }

    pub fn model(&self) -> &Arc<ClsModel<f32>> {
        &self.model
    }

    /// Newest-window confidence for the held windows, LSTM run from a zero state.
    pub fn classify(model: &ClsModel<f32>, buffer: &WindowBuffer) -> Result<f32> {
        let proj: Vec<&[f32]> = buffer.features.iter().map(|f| f.projected.as_slice()).collect();
        if proj.is_empty() {
            return Err(Error::state("no inferred window to classify"));
        }
        let (conf, _) = model.run_sequence(&proj, None)?;
        Ok(*conf.last().expect("non-empty"))
    }

    /// Ingests preprocessed samples and runs every tick that became due.
    pub fn push_samples(&mut self, samples: &[[f64; CHANNELS]]) -> Result<Vec<PredictionEvent>> {
        self.buffer.push_samples(samples);
        let mut events = Vec::new();
        while self.buffer.pending() >= self.group {
            for _ in 0..self.group {
                events.push(tick_infer(&mut self.buffer, &self.model)?);
            }
        }
        Ok(events)
    }

    /// Runs ticks for windows still held back by grouping.
    pub fn flush(&mut self) -> Result<Vec<PredictionEvent>> {
        let mut events = Vec::new();
        while self.buffer.pending() > 0 {
            events.push(tick_infer(&mut self.buffer, &self.model)?);
        }
        Ok(events)
    }
}

/// Raw samples in, predictions out: optional axis remap, online resampling,
/// streaming smoothing, then the engine.
pub struct LivePipeline {
    opts: PreprocessOptions,
    resampler: OnlineResampler,
    smoother: StreamingSmoother,
    engine: StreamingEngine,
}

impl LivePipeline {
    pub fn new(model: Arc<ClsModel<f32>>, opts: PreprocessOptions) -> Result<Self> {
        Ok(Self {
            opts,
            resampler: OnlineResampler::new(),
            smoother: StreamingSmoother::new(opts.smooth_width)?,
            engine: StreamingEngine::new(model),
        })
    }

    pub fn engine(&self) -> &StreamingEngine {
        &self.engine
    }

    pub fn push(&mut self, sample: &RawSample) -> Result<Vec<PredictionEvent>> {
        let mut s = *sample;
        if self.opts.remap_watch {
            s.values = remap_watch_axes(s.values);
        }
        let rows = self.resampler.push(&s)?;
        self.feed(rows)
    }

    /// Flushes the resampler at the end of a recording.
    pub fn finish(&mut self) -> Result<Vec<PredictionEvent>> {
        let rows = self.resampler.finish();
        let mut events = self.feed(rows)?;
        events.extend(self.engine.flush()?);
        Ok(events)
    }

    fn feed(&mut self, rows: Vec<[f64; CHANNELS]>) -> Result<Vec<PredictionEvent>> {
        let smoothed: Vec<_> = rows.into_iter().map(|r| self.smoother.push(r)).collect();
        self.engine.push_samples(&smoothed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub window_count: usize,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
    pub repetitions: usize,
    pub warmup: usize,
    /// Mean of the per-count means.
    pub overall_mean_ms: f64,
    pub spearman: f64,
}

impl LatencyReport {
    pub fn to_table(&self) -> String {
        let mut out = String::from("window_count\tmean_ms\tmin_ms\tmax_ms\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{:.3}\t{:.3}\t{:.3}\n", r.window_count, r.mean_ms, r.min_ms, r.max_ms));
        }
        let at_max = self.rows.last().map_or(0.0, |r| r.mean_ms);
        out.push_str(&format!(
            "# overall mean {:.3} ms, {} windows {:.3} ms, spearman {:.3}, {} reps after {} warm-up\n",
            self.overall_mean_ms,
            self.rows.len(),
            at_max,
            self.spearman,
            self.repetitions,
            self.warmup
        ));
        out
    }
}

/// Ranks with ties averaged, 1-based.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Times a full classifier pass (features for every window, then the LSTM)
/// for each window count 1..=`max_windows`.
pub fn bench_latency(model: &ClsModel<f32>, max_windows: usize, repetitions: usize, seed: u64) -> Result<LatencyReport> {
    if repetitions == 0 {
        return Err(Error::validation("benchmark needs at least one repetition"));
    }
    if max_windows == 0 || max_windows > MAX_WINDOWS {
        return Err(Error::validation(format!("window counts must lie in 1..={MAX_WINDOWS}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows: Vec<Window> = (0..max_windows)
        .map(|_| Window { data: (0..CHANNELS * WINDOW_LEN).map(|_| rng.random_range(-2.0..2.0)).collect() })
        .collect();
    let mut rows = Vec::with_capacity(max_windows);
    for t in 1..=max_windows {
        let mut times = Vec::with_capacity(repetitions);
        for i in 0..BENCH_WARMUP + repetitions {
            let t0 = Instant::now();
            std::hint::black_box(model.cls_forward(&windows[..t], None)?);
            if i >= BENCH_WARMUP {
                times.push(t0.elapsed().as_secs_f64() * 1000.0);
            }
        }
        rows.push(LatencyRow {
            window_count: t,
            mean_ms: times.iter().sum::<f64>() / times.len() as f64,
            min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
            max_ms: times.iter().copied().fold(0.0, f64::max),
        });
    }
    let counts: Vec<f64> = rows.iter().map(|r| r.window_count as f64).collect();
    let means: Vec<f64> = rows.iter().map(|r| r.mean_ms).collect();
    Ok(LatencyReport {
        overall_mean_ms: means.iter().sum::<f64>() / means.len() as f64,
        spearman: spearman(&counts, &means),
        rows,
        repetitions,
        warmup: BENCH_WARMUP,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize, offset: usize) -> Vec<[f64; CHANNELS]> {
        (0..n).map(|i| [(i + offset) as f64; CHANNELS]).collect()
    }

    #[test]
    fn warm_up_boundary() {
        let mut b = WindowBuffer::new();
        assert_eq!(b.push_samples(&rows(255, 0)), 0);
        assert_eq!(b.push_samples(&rows(1, 255)), 1);
        assert_eq!(b.push_samples(&rows(63, 256)), 0);
        assert_eq!(b.push_samples(&rows(1, 319)), 1);
    }

    #[test]
    fn consecutive_windows_overlap() {
        let mut b = WindowBuffer::new();
        b.push_samples(&rows(256 + 64 * 3, 0));
        let w: Vec<_> = b.pending.iter().collect();
        for k in 0..w.len() - 1 {
            let (s0, a) = w[k];
            let (s1, c) = w[k + 1];
            assert_eq!(*s1, s0 + 64);
            for ch in 0..CHANNELS {
                assert_eq!(a.channel(ch)[64..], c.channel(ch)[..192]);
            }
        }
    }

    #[test]
    fn spearman_monotone() {
        let x: Vec<f64> = (1..=32).map(|v| v as f64).collect();
        assert!((spearman(&x, &x) - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert!((spearman(&x, &rev) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn tick_without_window_is_state_error() {
        use crate::models::{ClsModelConfig, SegModel, SegModelConfig};
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seg_cfg =
            SegModelConfig { kernel: 3, stages: 2, blocks: 1, first_channels: 4, last_channels: 8, compact: true };
        let seg = SegModel::new(seg_cfg, &mut rng).unwrap();
        let cfg = ClsModelConfig { skip_channels: 2, skip_kernel: 3, projection: 4, lstm_hidden: 3, lstm_layers: 1 };
        let model = ClsModel::new(cfg, seg, &mut rng).unwrap();
        assert!(matches!(tick_infer(&mut WindowBuffer::new(), &model), Err(Error::State(_))));
    }
}
