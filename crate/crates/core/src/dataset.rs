//! Windowing, labelling and augmentation of uniform series.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{UniformSeries, Window};
use crate::{CHANNELS, INFER_STRIDE, MAX_WINDOWS, WINDOW_LEN};

/// Half-width of the positive region around an end-of-rep marker (±40 ms).
pub const LABEL_RADIUS: usize = 4;
/// Reps with at most this many repetitions in reserve are near failure.
pub const NEAR_FAILURE_RIR: u32 = 2;

pub const STRETCH_RANGE: (f64, f64) = (1.0, 1.5);
pub const AMPLITUDE_RANGE: (f64, f64) = (0.6, 1.4);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowingParams {
    pub window: usize,
    pub train_stride: usize,
    pub infer_stride: usize,
    pub max_windows: usize,
}

impl Default for WindowingParams {
    fn default() -> Self {
        Self {
            window: WINDOW_LEN,
            train_stride: 2,
            infer_stride: INFER_STRIDE,
            max_windows: MAX_WINDOWS,
        }
    }
}

impl WindowingParams {
    /// Samples spanned by `max_windows` windows at the inference stride.
    pub fn sequence_span(&self) -> usize {
        (self.max_windows - 1) * self.infer_stride + self.window
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.train_stride == 0 || self.infer_stride == 0 || self.max_windows == 0 {
            return Err(Error::validation("windowing parameters must be positive"));
        }
        Ok(())
    }
}

/// Per-point repetitions in reserve, aligned to a [`UniformSeries`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RirTrace {
    pub values: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub window: Window,
    pub seg_labels: Vec<u8>,
    pub near_failure: bool,
    /// (session id, start index)
    pub origin: (usize, usize),
}

/// Splits `n` sessions into train and validation ids at whole-session
/// granularity. The train count is `floor(fraction * n)`, kept within `1..n`.
pub fn split_sessions(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::validation(format!("need at least 2 sessions to split, got {n}")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::validation(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n_train = ((fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n - 1);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Start indices `0, stride, 2*stride, ...` of every full window.
pub fn extract_windows(len: usize, w: usize, stride: usize) -> Vec<usize> {
    assert!(stride >= 1, "stride must be positive");
    if len < w {
        return Vec::new();
    }
    (0..=len - w).step_by(stride).collect()
}

/// Sets ±[`LABEL_RADIUS`] around each window-relative marker to 1.
fn mark_labels(relative_markers: impl IntoIterator<Item = usize>, w: usize) -> Vec<u8> {
    let mut labels = vec![0u8; w];
    for m in relative_markers {
        let lo = m.saturating_sub(LABEL_RADIUS);
        let hi = (m + LABEL_RADIUS).min(w - 1);
        labels[lo..=hi].fill(1);
    }
    labels
}

/// Per-point end-of-rep labels for the window starting at `start`.
pub fn segmentation_labels(series: &UniformSeries, start: usize, w: usize) -> Vec<u8> {
    let rel = series
        .marker_indices
        .iter()
        .filter(|&&m| m >= start && m < start + w)
        .map(|&m| m - start);
    mark_labels(rel, w)
}

/// Session-wide per-point labels (the truth used for overlap-averaged evaluation).
pub fn session_segmentation_labels(series: &UniformSeries) -> Vec<u8> {
    let n = series.len();
    let mut labels = vec![0u8; n];
    for &m in &series.marker_indices {
        let lo = m.saturating_sub(LABEL_RADIUS);
        let hi = (m + LABEL_RADIUS).min(n - 1);
        labels[lo..=hi].fill(1);
    }
    labels
}

/// Repetitions in reserve for every sample. Rep `i` (1-based) covers
/// `(marker[i-1], marker[i]]` and gets `N - i`; samples before the first
/// marker belong to rep 1 and samples after the last marker get 0.
pub fn rir_per_point(series: &UniformSeries) -> Result<RirTrace> {
    let markers = &series.marker_indices;
    if markers.is_empty() {
        return Err(Error::validation("RiR needs at least one end-of-rep marker"));
    }
    let n_reps = markers.len() as u32;
    let mut values = vec![0u32; series.len()];
    let mut rep = 0usize;
    for (i, v) in values.iter_mut().enumerate() {
        while rep < markers.len() && i > markers[rep] {
            rep += 1;
        }
        *v = if rep < markers.len() { n_reps - 1 - rep as u32 } else { 0 };
    }
    Ok(RirTrace { values })
}

fn majority_near_failure(values: &[u32]) -> bool {
    let near = values.iter().filter(|&&r| r <= NEAR_FAILURE_RIR).count();
    2 * near > values.len()
}

/// True iff strictly more than half the window lies in the RiR <= 2 region.
pub fn near_failure_label(rir: &RirTrace, start: usize, w: usize) -> bool {
    majority_near_failure(&rir.values[start..start + w])
}

/// Unaugmented labelled window.
pub fn label_window(series: &UniformSeries, rir: Option<&RirTrace>, session: usize, start: usize) -> LabeledWindow {
    LabeledWindow {
        window: series.window(start),
        seg_labels: segmentation_labels(series, start, WINDOW_LEN),
        near_failure: rir.is_some_and(|r| near_failure_label(r, start, WINDOW_LEN)),
        origin: (session, start),
    }
}

/// One draw of the two augmentation factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Time compression: `round(256 * stretch)` source samples become 256.
    pub stretch: f64,
    pub amplitude: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { stretch: 1.0, amplitude: 1.0 };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let stretch = rng.random_range(STRETCH_RANGE.0..=STRETCH_RANGE.1);
        let amplitude = rng.random_range(AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1);
        Self { stretch, amplitude }
    }
}

/// Draws augmentation factors from `rng` and applies them.
pub fn augment_window<R: Rng + ?Sized>(
    series: &UniformSeries,
    rir: Option<&RirTrace>,
    session: usize,
    start: usize,
    rng: &mut R,
) -> LabeledWindow {
    augment_window_with(series, rir, session, start, AugmentParams::sample(rng))
}

/// Crops `round(256 * stretch)` samples from `start`, resamples them to 256
/// (so the content plays faster) and scales every channel by `amplitude`.
/// Falls back to no stretch when the crop would run past the series end.
pub fn augment_window_with(
    series: &UniformSeries,
    rir: Option<&RirTrace>,
    session: usize,
    start: usize,
    params: AugmentParams,
) -> LabeledWindow {
    let w = WINDOW_LEN;
    let mut f = params.stretch.max(1.0);
    let mut n_src = (w as f64 * f).round() as usize;
    if start + n_src > series.len() {
        f = 1.0;
        n_src = w;
    }
    let a = params.amplitude;

    let mut data = Vec::with_capacity(CHANNELS * w);
    for ch in &series.channels {
        let src = &ch[start..start + n_src];
        for j in 0..w {
            let pos = (j as f64 * f).min((n_src - 1) as f64);
            let lo = pos.floor() as usize;
            let v = if lo + 1 < n_src {
                let frac = pos - lo as f64;
                src[lo] + (src[lo + 1] - src[lo]) * frac
            } else {
                src[lo]
            };
            data.push((v * a) as f32);
        }
    }

    let rel = series
        .marker_indices
        .iter()
        .filter(|&&m| m >= start && m < start + n_src)
        .map(|&m| ((m - start) as f64 / f).round() as usize)
        .filter(|&c| c < w);
    let seg_labels = mark_labels(rel, w);
    let near_failure = rir.is_some_and(|r| majority_near_failure(&r.values[start..start + n_src]));

    LabeledWindow { window: Window { data }, seg_labels, near_failure, origin: (session, start) }
}
