//! Synthetic curl sets with exact ground truth.
//!
//! Each rep is a bottom pause, a raised-cosine lift pulse and a longer
//! lowering pulse on the dominant gyro axis (z). The accelerometer follows
//! gravity as the forearm rotates. Fatigue shows up as longer reps, longer
//! pauses, smaller range and a 2.5 Hz tremor over the last reps. Rep ends
//! fall on the 100 Hz grid so labels derived from markers are exact.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::RirTrace;
use crate::error::{Error, Result};
use crate::session::{RawSample, Session};
use crate::SAMPLE_RATE_HZ;

const GRAVITY: f64 = 9.81;
/// Timestamps and values are rounded to this step so text round-trips exactly.
const QUANTUM: f64 = 1e6;
const LIFT_SHARE: f64 = 0.45;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticProfile {
    pub reps: usize,
    /// Seconds of lift plus lower for rep 1.
    pub rep_duration: f64,
    /// Fractional duration increase per rep.
    pub slowdown: f64,
    /// Bottom pause before rep 1, seconds.
    pub pause: f64,
    /// Fractional pause increase per rep.
    pub pause_growth: f64,
    /// Range of motion of rep 1, radians.
    pub amplitude: f64,
    /// Fractional range loss per rep.
    pub amplitude_decay: f64,
    /// Tremor amplitude (rad/s) over the last `tremor_reps` reps.
    pub tremor: f64,
    pub tremor_hz: f64,
    pub tremor_reps: usize,
    pub jitter_ms: f64,
    pub gyro_noise: f64,
    pub accel_noise: f64,
    pub lead_in: f64,
    pub tail: f64,
    pub seed: u64,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        Self {
            reps: 10,
            rep_duration: 2.0,
            slowdown: 0.06,
            pause: 0.5,
            pause_growth: 0.2,
            amplitude: 1.9,
            amplitude_decay: 0.02,
            tremor: 0.6,
            tremor_hz: 2.5,
            tremor_reps: 3,
            jitter_ms: 3.0,
            gyro_noise: 0.05,
            accel_noise: 0.1,
            lead_in: 1.0,
            tail: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticProfile {
    /// Randomized profile for set `index` of a corpus.
    pub fn sample(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        Self {
            reps: rng.random_range(8..=12),
            rep_duration: rng.random_range(1.6..=2.4),
            slowdown: rng.random_range(0.04..=0.08),
            pause: rng.random_range(0.3..=0.7),
            lead_in: rng.random_range(0.8..=1.5),
            tail: rng.random_range(0.3..=0.8),
            amplitude: rng.random_range(1.6..=2.2),
            seed: rng.random(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::validation("profile needs at least one rep"));
        }
        let positive = [self.rep_duration, self.tremor_hz];
        let non_negative = [
            self.slowdown,
            self.pause,
            self.pause_growth,
            self.amplitude,
            self.amplitude_decay,
            self.tremor,
            self.jitter_ms,
            self.gyro_noise,
            self.accel_noise,
            self.lead_in,
            self.tail,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::validation("profile durations and scales must be finite and non-negative"));
        }
        if self.jitter_ms >= 5.0 {
            return Err(Error::validation("jitter must stay below half a sample period"));
        }
        if self.amplitude_decay * (self.reps as f64 - 1.0) >= 1.0 {
            return Err(Error::validation("amplitude decays to zero before the last rep"));
        }
        Ok(())
    }

    /// Lift plus lower duration of rep `i` (1-based).
    pub fn rep_duration_of(&self, i: usize) -> f64 {
        self.rep_duration * (1.0 + self.slowdown * (i as f64 - 1.0))
    }

    pub fn pause_of(&self, i: usize) -> f64 {
        self.pause * (1.0 + self.pause_growth * (i as f64 - 1.0))
    }

    pub fn amplitude_of(&self, i: usize) -> f64 {
        self.amplitude * (1.0 - self.amplitude_decay * (i as f64 - 1.0))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let p: Self = toml::from_str(s).map_err(|e| Error::format(format!("profile: {e}")))?;
        p.validate()?;
        Ok(p)
    }
}

/// A generated set and the truth it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSession {
    pub session: Session,
    /// Grid index of each rep end.
    pub marker_indices: Vec<usize>,
    /// Repetitions in reserve per grid point.
    pub rir: RirTrace,
}

struct Rep {
    start: f64,
    lift_start: f64,
    lower_start: f64,
    end: f64,
    amplitude: f64,
}

fn quantize(v: f64) -> f64 {
    (v * QUANTUM).round() / QUANTUM
}

fn grid(i: usize) -> f64 {
    i as f64 / SAMPLE_RATE_HZ
}

/// Angle (rad) and angular velocity (rad/s) of a raised-cosine pulse that
/// sweeps `amp` over `len` seconds, at `tau` seconds into it.
fn pulse(amp: f64, len: f64, tau: f64) -> (f64, f64) {
    let phase = 2.0 * PI * tau / len;
    let w = amp / len * (1.0 - phase.cos());
    let theta = amp / len * (tau - len / (2.0 * PI) * phase.sin());
    (theta, w)
}

fn schedule(p: &SyntheticProfile) -> (Vec<Rep>, Vec<usize>) {
    let mut reps = Vec::with_capacity(p.reps);
    let mut ends = Vec::with_capacity(p.reps);
    let mut start = (p.lead_in * SAMPLE_RATE_HZ).round() as usize;
    for i in 1..=p.reps {
        let raw_end = grid(start) + p.pause_of(i) + p.rep_duration_of(i);
        let end = ((raw_end * SAMPLE_RATE_HZ).round() as usize).max(start + 2);
        let lift_start = grid(start) + p.pause_of(i).min(grid(end) - grid(start) - 0.01);
        let motion = grid(end) - lift_start;
        reps.push(Rep {
            start: grid(start),
            lift_start,
            lower_start: lift_start + LIFT_SHARE * motion,
            end: grid(end),
            amplitude: p.amplitude_of(i),
        });
        ends.push(end);
        start = end;
    }
    (reps, ends)
}

/// Noise-free (angle, angular velocity) at time `t`.
fn motion_at(reps: &[Rep], t: f64) -> (f64, f64) {
    for r in reps {
        if t >= r.lift_start && t < r.lower_start {
            return pulse(r.amplitude, r.lower_start - r.lift_start, t - r.lift_start);
        }
        if t >= r.lower_start && t < r.end {
            let (theta, w) = pulse(r.amplitude, r.end - r.lower_start, t - r.lower_start);
            return (r.amplitude - theta, -w);
        }
    }
    (0.0, 0.0)
}

pub fn generate_session(profile: &SyntheticProfile) -> Result<SyntheticSession> {
    profile.validate()?;
    let (reps, ends) = schedule(profile);
    let last = *ends.last().expect("at least one rep");
    let n = last + (profile.tail * SAMPLE_RATE_HZ).round() as usize + 1;
    let tremor_from = reps[profile.reps.saturating_sub(profile.tremor_reps)].start;

    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let jitter = Normal::new(0.0, profile.jitter_ms / 1000.0).expect("finite std");
    let gyro_noise = Normal::new(0.0, profile.gyro_noise).expect("finite std");
    let accel_noise = Normal::new(0.0, profile.accel_noise).expect("finite std");
    let jitter_cap = 0.45 / SAMPLE_RATE_HZ;

    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let mut t = grid(k);
        if k > 0 && k + 1 < n {
            t += jitter.sample(&mut rng).clamp(-jitter_cap, jitter_cap);
        }
        let t = quantize(t);
        let (theta, w) = motion_at(&reps, t);
        let mut gyro = [0.0, 0.0, w];
        if t >= tremor_from {
            for (c, g) in gyro.iter_mut().enumerate() {
                *g += profile.tremor * (2.0 * PI * profile.tremor_hz * t + c as f64 * 2.1).sin();
            }
        }
        for g in &mut gyro {
            *g += gyro_noise.sample(&mut rng);
        }
        let accel = [GRAVITY * theta.cos(), GRAVITY * theta.sin(), 0.5 * w];
        let mut values = [0.0; 6];
        for c in 0..3 {
            values[c] = quantize(accel[c] + accel_noise.sample(&mut rng));
            values[c + 3] = quantize(gyro[c]);
        }
        samples.push(RawSample::new(t, values));
    }

    let n_reps = profile.reps as u32;
    let rir = (0..n)
        .map(|k| {
            let t = grid(k);
            match reps.iter().position(|r| t <= r.end) {
                Some(i) => n_reps - 1 - i as u32,
                None => 0,
            }
        })
        .collect();

    let mut meta = BTreeMap::new();
    meta.insert("source".into(), "synth".into());
    meta.insert("seed".into(), profile.seed.to_string());
    meta.insert("reps".into(), profile.reps.to_string());
    let session = Session { samples, markers: ends.iter().map(|&e| quantize(grid(e))).collect(), meta };
    session.validate()?;
    Ok(SyntheticSession { session, marker_indices: ends, rir: RirTrace { values: rir } })
}

/// `sets` randomized sessions derived from one seed.
pub fn generate_corpus(sets: usize, seed: u64) -> Result<Vec<SyntheticSession>> {
    (0..sets as u64).map(|i| generate_session(&SyntheticProfile::sample(seed, i))).collect()
}

/// Writes `set_000`, `set_001`, ... file triplets into `dir`.
pub fn write_corpus(dir: &Path, sessions: &[SyntheticSession]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in sessions.iter().enumerate() {
        crate::session::write_session(&dir.join(format!("set_{i:03}")), &s.session)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::rir_per_point;
    use crate::signal::{preprocess, PreprocessOptions};

    #[test]
    fn marker_count_and_near_failure_region() {
        let p = SyntheticProfile { reps: 8, ..Default::default() };
        let s = generate_session(&p).unwrap();
        assert_eq!(s.session.markers.len(), 8);
        let near: Vec<usize> = (0..s.rir.values.len()).filter(|&i| s.rir.values[i] <= 2).collect();
        assert_eq!(near[0], s.marker_indices[4] + 1);
    }

    #[test]
    fn deterministic() {
        let p = SyntheticProfile::sample(3, 1);
        assert_eq!(generate_session(&p).unwrap(), generate_session(&p).unwrap());
    }

    #[test]
    fn slowdown_schedule() {
        let p = SyntheticProfile { slowdown: 0.1, ..Default::default() };
        assert!((p.rep_duration_of(8) / p.rep_duration_of(1) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn pipeline_recovers_truth() {
        for i in 0..5 {
            let s = generate_session(&SyntheticProfile::sample(11, i)).unwrap();
            let series = preprocess(&s.session, PreprocessOptions::default()).unwrap();
            assert_eq!(series.marker_indices, s.marker_indices);
            assert_eq!(rir_per_point(&series).unwrap(), s.rir);
        }
    }

    #[test]
    fn zero_reps_rejected() {
        assert!(generate_session(&SyntheticProfile { reps: 0, ..Default::default() }).is_err());
    }
}
