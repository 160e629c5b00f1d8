//! Metrics, overlap-averaged session predictions and the simulated
//! real-time protocol.

use serde::{Deserialize, Serialize};

use crate::dataset::{extract_windows, near_failure_label, rir_per_point, session_segmentation_labels};
use crate::error::{Error, Result};
use crate::models::ClsModel;
use crate::signal::UniformSeries;
use crate::streaming::{StreamingEngine, WindowBuffer};
use crate::{INFER_STRIDE, SAMPLE_RATE_HZ, WINDOW_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

impl BinaryMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        let accuracy = ratio(tp + tn, tp + fp + fn_ + tn);
        Self { tp, fp, fn_, tn, precision, recall, f1, accuracy }
    }
}

pub fn binary_metrics(pred: &[bool], truth: &[bool]) -> Result<BinaryMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::validation(format!(
            "prediction length {} differs from truth length {}",
            pred.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(BinaryMetrics::from_counts(tp, fp, fn_, tn))
}

/// Unweighted mean; 0 for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Per-point mean of every window confidence covering the point. Points no
/// window covers get `None`.
pub fn merge_overlapping_predictions(len: usize, windows: &[(usize, Vec<f32>)]) -> Vec<Option<f64>> {
    let mut sum = vec![0.0f64; len];
    let mut count = vec![0u32; len];
    for (start, conf) in windows {
        for (j, &c) in conf.iter().enumerate() {
            if let Some(i) = start.checked_add(j).filter(|&i| i < len) {
                sum[i] += c as f64;
                count[i] += 1;
            }
        }
    }
    sum.into_iter().zip(count).map(|(s, c)| (c > 0).then(|| s / c as f64)).collect()
}

/// `[[tn, fp], [fn, tp]]` with each row divided by its true-class count
/// (rows with no examples stay zero).
pub fn confusion_matrix(pred: &[bool], truth: &[bool]) -> Result<[[f64; 2]; 2]> {
    let m = binary_metrics(pred, truth)?;
    let row = |a: usize, b: usize| {
        let n = (a + b) as f64;
        if n == 0.0 {
            [0.0, 0.0]
        } else {
            [a as f64 / n, b as f64 / n]
        }
    };
    Ok([row(m.tn, m.fp), row(m.fn_, m.tp)])
}

/// One classifier tick of a simulated or live run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    /// Seconds since the series start at which the tick fires.
    pub time_s: f64,
    /// Sample index one past the newest window.
    pub end_index: usize,
    pub windows_used: usize,
    pub confidence: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionPrediction {
    /// Overlap-averaged segmentation confidence per covered point.
    pub seg_confidence: Vec<Option<f64>>,
    pub ticks: Vec<TickRecord>,
}

/// Replays a preprocessed series as if it arrived live: a tick after the
/// first 256 samples and every 64 after that.
pub fn simulate_realtime_session(series: &UniformSeries, model: &ClsModel<f32>) -> Result<SessionPrediction> {
    if series.len() < WINDOW_LEN {
        return Err(Error::validation(format!(
            "series of {} samples is shorter than one window",
            series.len()
        )));
    }
    let starts = extract_windows(series.len(), WINDOW_LEN, INFER_STRIDE);
    let windows: Vec<_> = starts.iter().map(|&s| series.window(s)).collect();
    let refs: Vec<_> = windows.iter().collect();
    let mut features = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(64) {
        features.extend(model.window_features(chunk)?);
    }
    let mut buffer = WindowBuffer::new();
    let mut ticks = Vec::with_capacity(starts.len());
    let mut seg = Vec::with_capacity(starts.len());
    for (k, (&start, f)) in starts.iter().zip(features).enumerate() {
        seg.push((start, f.confidences.clone()));
        buffer.push_features(f);
        let conf = StreamingEngine::classify(model, &buffer)?;
        ticks.push(TickRecord {
            tick: k as u64,
            time_s: (start + WINDOW_LEN) as f64 / SAMPLE_RATE_HZ,
            end_index: start + WINDOW_LEN,
            windows_used: buffer.len(),
            confidence: conf,
        });
    }
    Ok(SessionPrediction { seg_confidence: merge_overlapping_predictions(series.len(), &seg), ticks })
}

/// Per-session scores under the simulated real-time protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub name: String,
    pub segmentation: BinaryMetrics,
    pub near_failure: BinaryMetrics,
    pub seg_confusion: [[f64; 2]; 2],
    pub nf_confusion: [[f64; 2]; 2],
    pub ticks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sessions: Vec<SessionReport>,
    pub mean_seg_f1: f64,
    pub mean_nf_f1: f64,
    pub seg_confusion: [[f64; 2]; 2],
    pub nf_confusion: [[f64; 2]; 2],
}

/// Thresholded predictions and truths of one session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionDecisions {
    pub seg_pred: Vec<bool>,
    pub seg_truth: Vec<bool>,
    pub nf_pred: Vec<bool>,
    pub nf_truth: Vec<bool>,
}

/// Thresholds a simulated run. Segmentation truth is per covered point; the
/// near-failure truth of a tick is the label of its newest window.
pub fn session_decisions(series: &UniformSeries, pred: &SessionPrediction) -> Result<SessionDecisions> {
    let seg_labels = session_segmentation_labels(series);
    let mut d = SessionDecisions::default();
    for (c, &t) in pred.seg_confidence.iter().zip(&seg_labels) {
        if let Some(c) = c {
            d.seg_pred.push(*c >= 0.5);
            d.seg_truth.push(t == 1);
        }
    }
    let rir = rir_per_point(series)?;
    for t in &pred.ticks {
        d.nf_pred.push(t.confidence >= 0.5);
        d.nf_truth.push(near_failure_label(&rir, t.end_index - WINDOW_LEN, WINDOW_LEN));
    }
    Ok(d)
}

pub fn evaluate_session(name: &str, series: &UniformSeries, model: &ClsModel<f32>) -> Result<(SessionReport, SessionDecisions)> {
    let pred = simulate_realtime_session(series, model)?;
    let d = session_decisions(series, &pred)?;
    let report = SessionReport {
        name: name.to_string(),
        segmentation: binary_metrics(&d.seg_pred, &d.seg_truth)?,
        near_failure: binary_metrics(&d.nf_pred, &d.nf_truth)?,
        seg_confusion: confusion_matrix(&d.seg_pred, &d.seg_truth)?,
        nf_confusion: confusion_matrix(&d.nf_pred, &d.nf_truth)?,
        ticks: pred.ticks.len(),
    };
    Ok((report, d))
}

/// Per-session reports, unweighted mean F1s and confusion matrices pooled
/// over all sessions.
pub fn evaluate(named: &[(String, UniformSeries)], model: &ClsModel<f32>) -> Result<EvalReport> {
    let mut sessions = Vec::new();
    let mut all = SessionDecisions::default();
    for (name, series) in named {
        let (r, d) = evaluate_session(name, series, model)?;
        sessions.push(r);
        all.seg_pred.extend(d.seg_pred);
        all.seg_truth.extend(d.seg_truth);
        all.nf_pred.extend(d.nf_pred);
        all.nf_truth.extend(d.nf_truth);
    }
    Ok(EvalReport {
        mean_seg_f1: mean(&sessions.iter().map(|s| s.segmentation.f1).collect::<Vec<_>>()),
        mean_nf_f1: mean(&sessions.iter().map(|s| s.near_failure.f1).collect::<Vec<_>>()),
        seg_confusion: confusion_matrix(&all.seg_pred, &all.seg_truth)?,
        nf_confusion: confusion_matrix(&all.nf_pred, &all.nf_truth)?,
        sessions,
    })
}

impl EvalReport {
    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("session\tseg_f1\tseg_p\tseg_r\tnf_f1\tnf_p\tnf_r\tticks\n");
        for s in &self.sessions {
            out.push_str(&format!(
                "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
                s.name,
                s.segmentation.f1,
                s.segmentation.precision,
                s.segmentation.recall,
                s.near_failure.f1,
                s.near_failure.precision,
                s.near_failure.recall,
                s.ticks
            ));
        }
        out.push_str(&format!("mean_seg_f1\t{:.4}\nmean_nf_f1\t{:.4}\n", self.mean_seg_f1, self.mean_nf_f1));
        for (label, m) in [("segmentation", self.seg_confusion), ("near_failure", self.nf_confusion)] {
            out.push_str(&format!(
                "confusion {label} (rows: true neg, true pos)\n{:.4}\t{:.4}\n{:.4}\t{:.4}\n",
                m[0][0], m[0][1], m[1][0], m[1][1]
            ));
        }
        out
    }
}
