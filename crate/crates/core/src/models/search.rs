//! Exhaustive parameter-count match over the segmentation config lattice.
//!
//! Lattice: stem kernel {3,5,7} × stages 4..=8 × blocks {1,2} × first-stage
//! channels 64..=256 (step 1), last stage fixed at 512.

use super::{SegModelConfig, FULL_ENCODING};
use crate::WINDOW_LEN;

pub const SEG_TOTAL_TARGET: usize = 2_971_648;
/// Total minus the 512→256 head.
pub const SEG_BASE_TARGET: usize = SEG_TOTAL_TARGET - (FULL_ENCODING * WINDOW_LEN + WINDOW_LEN);

const KERNELS: [usize; 3] = [3, 5, 7];
const STAGES: std::ops::RangeInclusive<usize> = 4..=8;
const BLOCKS: [usize; 2] = [1, 2];
const FIRST: std::ops::RangeInclusive<usize> = 64..=256;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchReport {
    pub evaluated: usize,
    /// Configs whose base count equals the target.
    pub exact: Vec<SegModelConfig>,
    /// Configs within 1% of the target with their signed delta.
    pub near: Vec<(SegModelConfig, i64)>,
    /// Smallest |delta|, earliest in lattice order on ties.
    pub closest: (SegModelConfig, i64),
}

pub fn lattice_size() -> usize {
    KERNELS.len() * STAGES.count() * BLOCKS.len() * FIRST.count()
}

pub fn lattice() -> impl Iterator<Item = SegModelConfig> {
    KERNELS.into_iter().flat_map(|kernel| {
        STAGES.flat_map(move |stages| {
            BLOCKS.into_iter().flat_map(move |blocks| {
                FIRST.map(move |first_channels| SegModelConfig {
                    kernel,
                    stages,
                    blocks,
                    first_channels,
                    last_channels: FULL_ENCODING,
                    compact: false,
                })
            })
        })
    })
}

/// Base parameters (everything before the head).
pub fn base_param_count(cfg: &SegModelConfig) -> usize {
    cfg.param_count() - (cfg.encoding_width() * WINDOW_LEN + WINDOW_LEN)
}

pub fn recover_seg_config(target_base: usize) -> SearchReport {
    let mut evaluated = 0;
    let mut exact = Vec::new();
    let mut near = Vec::new();
    let mut closest: Option<(SegModelConfig, i64)> = None;
    for cfg in lattice() {
        evaluated += 1;
        let delta = base_param_count(&cfg) as i64 - target_base as i64;
        if delta == 0 {
            exact.push(cfg.clone());
        }
        if (delta.unsigned_abs() as f64) <= 0.01 * target_base as f64 {
            near.push((cfg.clone(), delta));
        }
        if closest.as_ref().is_none_or(|(_, d)| delta.abs() < d.abs()) {
            closest = Some((cfg, delta));
        }
    }
    SearchReport { evaluated, exact, near, closest: closest.expect("lattice is not empty") }
}
