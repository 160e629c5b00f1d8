//! The segmentation and near-failure networks, their configs, marker
//! post-processing and weight files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{SAMPLE_RATE_HZ, WINDOW_LEN};

mod cls;
mod search;
mod seg;
mod weights;

pub use cls::{ClsBatch, ClsModel, WindowFeatures};
pub use search::{base_param_count, lattice, lattice_size, recover_seg_config, SearchReport, SEG_BASE_TARGET, SEG_TOTAL_TARGET};
pub use seg::{ResBlock, SegModel, SegOutput};
pub use weights::{load_weights, read_weights, save_weights, write_weights, ModelWeights, NamedTensor, RPML_VERSION};

/// Kernel of every residual-block convolution.
pub const BLOCK_KERNEL: usize = 3;
/// Encoding width forced by the 512→256 head of the full-size model.
pub const FULL_ENCODING: usize = 512;

/// Residual 1D CNN shape. Stage widths are interpolated log-linearly between
/// `first_channels` and `last_channels`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegModelConfig {
    pub kernel: usize,
    pub stages: usize,
    pub blocks: usize,
    pub first_channels: usize,
    pub last_channels: usize,
    /// Lifts the search-lattice ranges so small models can be trained on a
    /// desktop. Off for the full-size model.
    #[serde(default)]
    pub compact: bool,
}

impl SegModelConfig {
    pub fn stage_channels(&self) -> Vec<usize> {
        if self.stages == 1 {
            return vec![self.last_channels];
        }
        let ratio = self.last_channels as f64 / self.first_channels as f64;
        (0..self.stages)
            .map(|s| {
                let f = s as f64 / (self.stages - 1) as f64;
                (self.first_channels as f64 * ratio.powf(f)).round() as usize
            })
            .collect()
    }

    pub fn encoding_width(&self) -> usize {
        self.last_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.compact {
            if self.kernel % 2 == 0 || self.stages == 0 || self.blocks == 0 || self.first_channels == 0 {
                return Err(Error::validation("compact seg config: kernel must be odd and sizes positive"));
            }
            if self.last_channels < self.first_channels {
                return Err(Error::validation("last-stage channels below first-stage channels"));
            }
            if WINDOW_LEN >> self.stages == 0 {
                return Err(Error::validation("too many stride-2 stages for a 256-sample window"));
            }
            return Ok(());
        }
        if ![3, 5, 7].contains(&self.kernel) {
            return Err(Error::validation(format!("first conv kernel {} not in {{3,5,7}}", self.kernel)));
        }
        if !(4..=8).contains(&self.stages) {
            return Err(Error::validation(format!("stage count {} outside 4..=8", self.stages)));
        }
        if !(1..=2).contains(&self.blocks) {
            return Err(Error::validation(format!("blocks per stage {} outside 1..=2", self.blocks)));
        }
        if !(64..=256).contains(&self.first_channels) {
            return Err(Error::validation(format!("first-stage channels {} outside 64..=256", self.first_channels)));
        }
        if self.last_channels != FULL_ENCODING {
            return Err(Error::validation(format!(
                "last-stage channels must be {FULL_ENCODING} (encoding width), got {}",
                self.last_channels
            )));
        }
        Ok(())
    }

    /// Parameter count computed from the shape alone.
    pub fn param_count(&self) -> usize {
        let ch = self.stage_channels();
        let bn = |c: usize| 2 * c;
        let mut total = 6 * ch[0] * self.kernel + ch[0] + bn(ch[0]);
        let mut prev = ch[0];
        for &c in &ch {
            for b in 0..self.blocks {
                let stride = if b == 0 { 2 } else { 1 };
                total += prev * c * BLOCK_KERNEL + c + bn(c);
                if prev != c || stride != 1 {
                    total += prev * c + c + bn(c);
                }
                prev = c;
            }
        }
        total + self.encoding_width() * WINDOW_LEN + WINDOW_LEN
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::format(format!("seg config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Closest full-size match to the published parameter count; see
    /// `configs/seg_full.toml`.
    pub fn full() -> Self {
        Self::from_toml_str(include_str!("../../configs/seg_full.toml")).expect("bundled config is valid")
    }

    /// Small model used for desktop training.
    pub fn compact() -> Self {
        Self::from_toml_str(include_str!("../../configs/seg_compact.toml")).expect("bundled config is valid")
    }
}

/// Near-failure classifier shape on top of a frozen segmentation base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClsModelConfig {
    pub skip_channels: usize,
    pub skip_kernel: usize,
    pub projection: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
}

impl ClsModelConfig {
    pub fn full() -> Self {
        Self { skip_channels: 64, skip_kernel: 3, projection: 256, lstm_hidden: 256, lstm_layers: 4 }
    }

    pub fn compact() -> Self {
        Self { skip_channels: 64, skip_kernel: 3, projection: 32, lstm_hidden: 32, lstm_layers: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.skip_channels == 0 || self.projection == 0 || self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return Err(Error::validation("classifier sizes must be positive"));
        }
        if self.skip_kernel % 2 == 0 {
            return Err(Error::validation("skip conv kernel must be odd"));
        }
        Ok(())
    }

    /// Width of the per-window feature vector fed to the projection.
    pub fn feature_width(&self, encoding: usize) -> usize {
        encoding + WINDOW_LEN + self.skip_channels
    }

    /// Trainable parameters given the frozen base's encoding width.
    pub fn trainable_param_count(&self, encoding: usize) -> usize {
        let skip = 6 * self.skip_channels * self.skip_kernel + self.skip_channels;
        let bn = 2 * self.skip_channels;
        let proj = self.feature_width(encoding) * self.projection + self.projection;
        let lstm = crate::nn::LstmSpec { input: self.projection, hidden: self.lstm_hidden, layers: self.lstm_layers }
            .param_count();
        skip + bn + proj + lstm + self.lstm_hidden + 1
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::format(format!("cls config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Both model configs, as stored in a config file and in weight metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seg: SegModelConfig,
    pub cls: ClsModelConfig,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self { seg: SegModelConfig::full(), cls: ClsModelConfig::full() }
    }

    pub fn compact() -> Self {
        Self { seg: SegModelConfig::compact(), cls: ClsModelConfig::compact() }
    }

    pub fn validate(&self) -> Result<()> {
        self.seg.validate()?;
        self.cls.validate()
    }
}

/// Post-processing of per-point segmentation confidences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerParams {
    pub threshold: f64,
    pub smooth_width: usize,
}

impl Default for MarkerParams {
    fn default() -> Self {
        Self { threshold: 0.5, smooth_width: 5 }
    }
}

/// Binarizes at `threshold`, applies a centred majority vote of
/// `smooth_width` (clipped at the edges) and returns the floor midpoint of
/// every maximal positive run.
pub fn extract_rep_markers<T: crate::nn::Float>(confidences: &[T], params: MarkerParams) -> Vec<usize> {
    let thr = T::of(params.threshold);
    let bin: Vec<bool> = confidences.iter().map(|&c| c >= thr).collect();
    let n = bin.len();
    let half = params.smooth_width / 2;
    let smoothed: Vec<bool> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let ones = bin[lo..hi].iter().filter(|&&b| b).count();
            2 * ones > hi - lo
        })
        .collect();
    let mut markers = Vec::new();
    let mut i = 0;
    while i < n {
        if smoothed[i] {
            let start = i;
            while i < n && smoothed[i] {
                i += 1;
            }
            markers.push((start + i - 1) / 2);
        } else {
            i += 1;
        }
    }
    markers
}

/// Seconds since the latest marker at or before each point, or since the
/// window start when there is none.
pub fn time_in_rep(markers: &[usize], len: usize) -> Result<Vec<f64>> {
    if markers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::validation("markers must be strictly increasing"));
    }
    let mut out = Vec::with_capacity(len);
    let mut next = 0;
    let mut last = 0;
    for i in 0..len {
        while next < markers.len() && markers[next] <= i {
            last = markers[next];
            next += 1;
        }
        out.push((i - last) as f64 / SAMPLE_RATE_HZ);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_and_base_arithmetic() {
        assert_eq!(FULL_ENCODING * WINDOW_LEN + WINDOW_LEN, 131_328);
        assert_eq!(SEG_TOTAL_TARGET - 131_328, SEG_BASE_TARGET);
    }

    #[test]
    fn classic_stage_widths() {
        let cfg = SegModelConfig { kernel: 7, stages: 4, blocks: 2, first_channels: 64, last_channels: 512, compact: false };
        assert_eq!(cfg.stage_channels(), vec![64, 128, 256, 512]);
    }

    #[test]
    fn full_classifier_trainable_count() {
        assert_eq!(ClsModelConfig::full().trainable_param_count(512), 2_320_193);
        assert_eq!(ClsModelConfig::full().feature_width(512), 832);
    }

    #[test]
    fn last_stage_must_be_512() {
        let mut cfg = SegModelConfig::full();
        cfg.last_channels = 256;
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn marker_examples() {
        let p = MarkerParams::default();
        assert!(extract_rep_markers(&[0.1f32; 256], p).is_empty());
        let mut c = vec![0.0f32; 256];
        c[100..=108].fill(0.9);
        assert_eq!(extract_rep_markers(&c, p), vec![104]);
        let mut c = vec![0.0f32; 256];
        c[10..=14].fill(0.9);
        c[16..=20].fill(0.9);
        assert_eq!(extract_rep_markers(&c, p), vec![15]);
    }

    #[test]
    fn time_in_rep_examples() {
        let v = time_in_rep(&[100, 200], 256).unwrap();
        assert!((v[150] - 0.5).abs() < 1e-12);
        assert!((v[250] - 0.5).abs() < 1e-12);
        assert!((v[50] - 0.5).abs() < 1e-12);
        assert_eq!(v[100], 0.0);
        let ramp = time_in_rep(&[], 256).unwrap();
        assert!((ramp[255] - 2.55).abs() < 1e-12);
        assert!(time_in_rep(&[5, 3], 256).is_err());
    }
}
