//! Real-time repetition segmentation and near-failure (RiR <= 2) detection
//! from a single 6-axis wrist IMU.
//!
//! The pipeline runs in two stages. A 1D convolutional ResNet marks the end
//! of every repetition inside a 256-sample window; a second model combines
//! the frozen ResNet encoding, a time-in-rep feature derived from the
//! segmentation output and a skip convolution, and feeds the per-window
//! result through a unidirectional LSTM spanning up to 32 overlapping
//! windows.
//!
//! Module map:
//!
//! * [`session`]: CSV/marker/metadata persistence of raw recordings.
//! * [`signal`]: resampling to 100 Hz, moving-average smoothing, axis remap.
//! * [`dataset`]: windowing, labels, RiR annotation, augmentation.
//! * [`nn`]: tensors, layers, losses, gradients and AdamW.
//! * [`models`]: the two networks, marker extraction, RPML weight files.
//! * [`training`], [`eval`]: training loops and the evaluation protocol.
//! * [`streaming`]: live window buffer, tick inference, latency benchmark.
//! * [`synth`]: deterministic synthetic preacher-curl sessions.
//! * [`service`]: the live-session socket endpoint.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod service;
pub mod session;
pub mod signal;
pub mod streaming;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

/// Uniform sample rate of every processed series, in Hz.
pub const SAMPLE_RATE_HZ: f64 = 100.0;
/// Window length in samples (2.56 s).
pub const WINDOW_LEN: usize = 256;
/// Number of IMU channels: ax, ay, az, gx, gy, gz.
pub const CHANNELS: usize = 6;
/// Stride between inference windows (640 ms).
pub const INFER_STRIDE: usize = 64;
/// Maximum number of windows the classifier sees at once.
pub const MAX_WINDOWS: usize = 32;
