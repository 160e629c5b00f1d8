//! Cleaning of raw recordings: linear resampling onto an exact 100 Hz grid,
//! trailing moving-average smoothing and watch-axis remapping.
//!
//! Every offline transform has a streaming twin ([`OnlineResampler`],
//! [`StreamingSmoother`]) that produces bit-identical values when fed the
//! same samples one at a time.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::session::{RawSample, Session};
use crate::{CHANNELS, SAMPLE_RATE_HZ, WINDOW_LEN};

/// Default moving-average width (150 ms).
pub const SMOOTH_WIDTH: usize = 15;

/// Grid times within this distance of a knot take the knot's value verbatim.
const KNOT_SNAP_S: f64 = 1e-9;

/// A 6-channel series sampled at exactly [`SAMPLE_RATE_HZ`].
#[derive(Debug, Clone, PartialEq)]
pub struct UniformSeries {
    /// Time of sample 0 in seconds.
    pub start_t: f64,
    pub channels: [Vec<f64>; CHANNELS],
    /// End-of-rep markers as sample indices, strictly increasing.
    pub marker_indices: Vec<usize>,
}

impl UniformSeries {
    pub fn from_rows(start_t: f64, rows: &[[f64; CHANNELS]], marker_indices: Vec<usize>) -> Self {
        let channels = std::array::from_fn(|c| rows.iter().map(|r| r[c]).collect());
        Self { start_t, channels, marker_indices }
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rate(&self) -> f64 {
        SAMPLE_RATE_HZ
    }

    pub fn row(&self, i: usize) -> [f64; CHANNELS] {
        std::array::from_fn(|c| self.channels[c][i])
    }

    /// Copies `WINDOW_LEN` samples starting at `start` into a model input.
    pub fn window(&self, start: usize) -> Window {
        let mut data = Vec::with_capacity(CHANNELS * WINDOW_LEN);
        for ch in &self.channels {
            data.extend(ch[start..start + WINDOW_LEN].iter().map(|&v| v as f32));
        }
        Window { data }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.channels.iter().any(|c| c.len() != n) {
            return Err(Error::validation("channels have unequal lengths"));
        }
        if self.marker_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("marker indices not strictly increasing"));
        }
        if self.marker_indices.last().is_some_and(|&m| m >= n) {
            return Err(Error::validation("marker index beyond series end"));
        }
        Ok(())
    }
}

/// One model input: 6 channels × 256 samples, channel-major, 32-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub data: Vec<f32>,
}

impl Window {
    pub fn zeros() -> Self {
        Self { data: vec![0.0; CHANNELS * WINDOW_LEN] }
    }

    pub fn from_rows(rows: &[[f64; CHANNELS]]) -> Result<Self> {
        if rows.len() != WINDOW_LEN {
            return Err(Error::validation(format!(
                "window needs {WINDOW_LEN} rows, got {}",
                rows.len()
            )));
        }
        let mut data = vec![0.0f32; CHANNELS * WINDOW_LEN];
        for (i, r) in rows.iter().enumerate() {
            for c in 0..CHANNELS {
                data[c * WINDOW_LEN + i] = r[c] as f32;
            }
        }
        Ok(Self { data })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * WINDOW_LEN..(c + 1) * WINDOW_LEN]
    }
}

/// Consecutive samples sharing a timestamp, collapsed to their mean.
#[derive(Debug, Clone, Copy)]
struct Knot {
    t: f64,
    v: [f64; CHANNELS],
}

#[derive(Debug, Clone, Copy)]
struct KnotAccumulator {
    t: f64,
    sum: [f64; CHANNELS],
    count: usize,
}

impl KnotAccumulator {
    fn new(s: &RawSample) -> Self {
        Self { t: s.t, sum: s.values, count: 1 }
    }

    fn add(&mut self, s: &RawSample) {
        for (a, b) in self.sum.iter_mut().zip(s.values) {
            *a += b;
        }
        self.count += 1;
    }

    fn finish(&self) -> Knot {
        if self.count == 1 {
            return Knot { t: self.t, v: self.sum };
        }
        let n = self.count as f64;
        Knot { t: self.t, v: self.sum.map(|x| x / n) }
    }
}

fn dedupe(samples: &[RawSample]) -> Vec<Knot> {
    let mut out = Vec::with_capacity(samples.len());
    let mut acc: Option<KnotAccumulator> = None;
    for s in samples {
        match acc.as_mut() {
            Some(a) if a.t == s.t => a.add(s),
            _ => {
                if let Some(a) = acc.take() {
                    out.push(a.finish());
                }
                acc = Some(KnotAccumulator::new(s));
            }
        }
    }
    out.extend(acc.map(|a| a.finish()));
    out
}

fn grid_time(start: f64, k: usize) -> f64 {
    start + k as f64 / SAMPLE_RATE_HZ
}

fn interpolate(tg: f64, a: &Knot, b: &Knot) -> [f64; CHANNELS] {
    if (tg - a.t).abs() <= KNOT_SNAP_S {
        return a.v;
    }
    if (tg - b.t).abs() <= KNOT_SNAP_S || tg >= b.t {
        return b.v;
    }
    let frac = (tg - a.t) / (b.t - a.t);
    std::array::from_fn(|c| a.v[c] + (b.v[c] - a.v[c]) * frac)
}

/// Number of grid points covering `[first, last]`.
fn grid_len(first: f64, last: f64) -> usize {
    ((last - first) * SAMPLE_RATE_HZ + 1e-9).floor() as usize + 1
}

/// Nearest grid index of time `t`, ties rounding down.
pub fn time_to_index(t: f64, start_t: f64) -> f64 {
    ((t - start_t) * SAMPLE_RATE_HZ - 0.5).ceil()
}

/// Linearly interpolates every channel onto `start_t + k / 100`.
///
/// Duplicate timestamps are averaged. Markers map to the nearest grid index.
pub fn resample_uniform(session: &Session) -> Result<UniformSeries> {
    if session.samples.windows(2).any(|w| w[1].t < w[0].t) {
        return Err(Error::validation("samples are not sorted by time"));
    }
    let knots = dedupe(&session.samples);
    if knots.len() < 2 {
        return Err(Error::validation(format!(
            "need at least 2 distinct timestamps, got {}",
            knots.len()
        )));
    }
    let first = knots[0].t;
    let last = knots[knots.len() - 1].t;
    let n = grid_len(first, last);

    let mut channels: [Vec<f64>; CHANNELS] = std::array::from_fn(|_| Vec::with_capacity(n));
    let mut j = 0usize;
    for k in 0..n {
        let tg = grid_time(first, k);
        while j + 2 < knots.len() && knots[j + 1].t < tg {
            j += 1;
        }
        let v = if k == 0 { knots[0].v } else { interpolate(tg, &knots[j], &knots[j + 1]) };
        for (ch, x) in channels.iter_mut().zip(v) {
            ch.push(x);
        }
    }

    let mut marker_indices: Vec<usize> = session
        .markers
        .iter()
        .map(|&m| time_to_index(m, first).clamp(0.0, (n - 1) as f64) as usize)
        .collect();
    marker_indices.dedup();

    Ok(UniformSeries { start_t: first, channels, marker_indices })
}

/// Trailing moving average: `out[i] = mean(in[max(0, i-width+1) ..= i])`.
pub fn smooth_moving_average(series: &UniformSeries, width: usize) -> Result<UniformSeries> {
    if width == 0 {
        return Err(Error::validation("moving-average width must be at least 1"));
    }
    if series.is_empty() {
        return Err(Error::validation("cannot smooth an empty series"));
    }
    let channels = std::array::from_fn(|c| trailing_mean(&series.channels[c], width));
    Ok(UniformSeries {
        start_t: series.start_t,
        channels,
        marker_indices: series.marker_indices.clone(),
    })
}

fn trailing_mean(x: &[f64], width: usize) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(width);
            window_mean(x[lo..=i].iter().copied())
        })
        .collect()
}

/// Mean taken relative to the first value, so constant input comes back
/// bit-for-bit.
fn window_mean(mut values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    let Some(first) = values.next() else { return f64::NAN };
    first + values.fold(0.0, |acc, v| acc + (v - first)) / n
}

/// Maps the watch frame onto the collection-IMU frame: `x' = y`, `y' = -x`,
/// `z' = -z`, for both the accelerometer and gyroscope triples.
pub fn remap_watch_axes(v: [f64; CHANNELS]) -> [f64; CHANNELS] {
    [v[1], -v[0], -v[2], v[4], -v[3], -v[5]]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessOptions {
    pub smooth_width: usize,
    /// Apply [`remap_watch_axes`] to every raw sample first.
    pub remap_watch: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self { smooth_width: SMOOTH_WIDTH, remap_watch: false }
    }
}

impl PreprocessOptions {
    /// Honors a `orientation=watch` metadata entry.
    pub fn for_session(session: &Session) -> Self {
        let remap_watch = session.meta.get("orientation").is_some_and(|o| o == "watch");
        Self { remap_watch, ..Self::default() }
    }
}

/// Full offline cleaning: optional remap, resample, smooth.
pub fn preprocess(session: &Session, opts: PreprocessOptions) -> Result<UniformSeries> {
    let series = if opts.remap_watch {
        let mut remapped = session.clone();
        for s in &mut remapped.samples {
            s.values = remap_watch_axes(s.values);
        }
        resample_uniform(&remapped)?
    } else {
        resample_uniform(session)?
    };
    smooth_moving_average(&series, opts.smooth_width)
}

/// Incremental [`resample_uniform`]: emits grid samples as soon as the knot
/// that closes their interval is known.
#[derive(Debug, Clone, Default)]
pub struct OnlineResampler {
    first_t: Option<f64>,
    prev: Option<Knot>,
    open: Option<KnotAccumulator>,
    next_k: usize,
}

impl OnlineResampler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Grid samples emitted so far.
    pub fn emitted(&self) -> usize {
        self.next_k
    }

    pub fn start_t(&self) -> Option<f64> {
        self.first_t
    }

    /// Feeds one raw sample; returns the grid samples it completes.
    pub fn push(&mut self, sample: &RawSample) -> Result<Vec<[f64; CHANNELS]>> {
        match self.open.as_mut() {
            Some(open) if sample.t < open.t => {
                return Err(Error::validation(format!(
                    "timestamp {} precedes {}",
                    sample.t, open.t
                )))
            }
            Some(open) if sample.t == open.t => {
                open.add(sample);
                return Ok(Vec::new());
            }
            _ => {}
        }
        let out = match self.open.take() {
            Some(open) => self.close_knot(open.finish()),
            None => Vec::new(),
        };
        self.open = Some(KnotAccumulator::new(sample));
        Ok(out)
    }

    /// Flushes the final knot and any grid points up to the last timestamp.
    pub fn finish(&mut self) -> Vec<[f64; CHANNELS]> {
        let Some(open) = self.open.take() else {
            return Vec::new();
        };
        let last = open.finish();
        let mut out = self.close_knot(last);
        if let (Some(first), Some(prev)) = (self.first_t, self.prev) {
            let n = grid_len(first, last.t);
            while self.next_k < n {
                out.push(prev.v);
                self.next_k += 1;
            }
        }
        out
    }

    fn close_knot(&mut self, knot: Knot) -> Vec<[f64; CHANNELS]> {
        let mut out = Vec::new();
        match self.prev {
            None => {
                self.first_t = Some(knot.t);
                out.push(knot.v);
                self.next_k = 1;
            }
            Some(prev) => {
                let first = self.first_t.unwrap_or(prev.t);
                loop {
                    let tg = grid_time(first, self.next_k);
                    if tg > knot.t {
                        break;
                    }
                    out.push(interpolate(tg, &prev, &knot));
                    self.next_k += 1;
                }
            }
        }
        self.prev = Some(knot);
        out
    }
}

/// Incremental trailing moving average matching [`smooth_moving_average`].
#[derive(Debug, Clone)]
pub struct StreamingSmoother {
    width: usize,
    history: VecDeque<[f64; CHANNELS]>,
}

impl StreamingSmoother {
    pub fn new(width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::validation("moving-average width must be at least 1"));
        }
        Ok(Self { width, history: VecDeque::with_capacity(width) })
    }

    pub fn push(&mut self, sample: [f64; CHANNELS]) -> [f64; CHANNELS] {
        if self.history.len() == self.width {
            self.history.pop_front();
        }
        self.history.push_back(sample);
        std::array::from_fn(|c| window_mean(self.history.iter().map(|r| r[c])))
    }
}
