//! Checks shared by the acceptance runner and the focused test files. Each
//! returns a one-line detail on success and the reason on failure.

#![allow(dead_code)]

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repsense::dataset::{extract_windows, near_failure_label, rir_per_point, split_sessions, WindowingParams};
use repsense::eval::{evaluate, simulate_realtime_session};
use repsense::models::{
    read_weights, ClsBatch, recover_seg_config, write_weights, ClsModel, ClsModelConfig, ModelConfig, ModelWeights, SegModel,
    SegModelConfig, SEG_BASE_TARGET, SEG_TOTAL_TARGET,
};
use repsense::nn::{
    bce_loss, combined_seg_loss, global_avg_pool, BatchNorm1d, BatchNormSpec, Conv1d, Conv1dSpec, Linear, Lstm, LstmSpec, Mode,
    Module, Tensor,
};
use repsense::session::{decode_session, encode_session, RawSample, Session};
use repsense::signal::{preprocess, PreprocessOptions};
use repsense::streaming::{bench_latency, LivePipeline};
use repsense::synth::{generate_corpus, generate_session, SyntheticProfile};
use repsense::training::{train_classification, train_segmentation, PreparedSession, TrainConfig};
use repsense::{CHANNELS, WINDOW_LEN};

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn compact_model(seed: u64) -> ClsModel<f32> {
    let cfg = ModelConfig::compact();
    let mut r = rng(seed);
    let seg = SegModel::new(cfg.seg, &mut r).unwrap();
    ClsModel::new(cfg.cls, seg, &mut r).unwrap()
}

// ---------------------------------------------------------------- counts

pub fn parameter_counts() -> Check {
    let cfg = ModelConfig::full();
    let mut r = rng(0);
    let seg = SegModel::<f32>::new(cfg.seg.clone(), &mut r).map_err(err)?;
    let seg_total = seg.param_count();
    let cls = ClsModel::new(cfg.cls, seg, &mut r).map_err(err)?;
    ensure!(cls.trainable_param_count() == 2_320_193, "trainable {} != 2,320,193", cls.trainable_param_count());
    ensure!(
        cls.param_count() == cls.frozen_param_count() + cls.trainable_param_count(),
        "total != frozen + trainable"
    );
    ensure!(cls.frozen_param_count() == seg_total, "frozen part is not the segmentation model");
    let report = recover_seg_config(SEG_BASE_TARGET);
    match report.exact.first() {
        Some(exact) => {
            ensure!(seg_total == SEG_TOTAL_TARGET, "exact lattice match exists ({exact:?}) but the pinned model has {seg_total}");
            Ok(format!("trainable 2,320,193; segmentation exactly {SEG_TOTAL_TARGET}"))
        }
        None => {
            let (closest, delta) = report.closest.clone();
            ensure!(closest == cfg.seg, "pinned config {:?} differs from closest {:?}", cfg.seg, closest);
            ensure!(seg_total as i64 - SEG_TOTAL_TARGET as i64 == delta, "pinned model count {seg_total} disagrees with delta {delta}");
            Ok(format!(
                "trainable 2,320,193 = total {} - frozen {}; no exact segmentation match in {} configs, closest k{}/{} stages/{} blocks/{}->512 = {seg_total} (delta {delta:+})",
                cls.param_count(),
                cls.frozen_param_count(),
                report.evaluated,
                closest.kernel,
                closest.stages,
                closest.blocks,
                closest.first_channels
            ))
        }
    }
}

// ---------------------------------------------------------------- oracles

fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn naive_conv(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, s: Conv1dSpec, l: usize) -> Vec<f64> {
    let lo = s.out_len(l);
    let mut out = vec![0.0; n * s.out_ch * lo];
    for bi in 0..n {
        for o in 0..s.out_ch {
            for t in 0..lo {
                let mut acc = b.map_or(0.0, |b| b[o]);
                for c in 0..s.in_ch {
                    for k in 0..s.kernel {
                        let pos = (t * s.stride + k) as isize - s.padding as isize;
                        if pos >= 0 && (pos as usize) < l {
                            acc += w[(o * s.in_ch + c) * s.kernel + k] * x[(bi * s.in_ch + c) * l + pos as usize];
                        }
                    }
                }
                out[(bi * s.out_ch + o) * lo + t] = acc;
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Returns the worst absolute deviation per layer kind over `shapes` random cases.
pub fn forward_oracle_errors(shapes: usize, seed: u64) -> Result<[f64; 5], String> {
    let mut r = rng(seed);
    let mut worst = [0.0f64; 5];
    for _ in 0..shapes {
        // conv
        let kernel = [1, 3, 5, 7][r.random_range(0..4)];
        let spec = Conv1dSpec {
            in_ch: r.random_range(1..6),
            out_ch: r.random_range(1..6),
            kernel,
            stride: r.random_range(1..3),
            padding: r.random_range(0..=kernel / 2),
            bias: r.random_bool(0.5),
        };
        let (n, l) = (r.random_range(1..4), r.random_range(kernel..40));
        let x = rand_vec(&mut r, n * spec.in_ch * l);
        let w = rand_vec(&mut r, spec.out_ch * spec.in_ch * kernel);
        let b = spec.bias.then(|| rand_vec(&mut r, spec.out_ch));
        let conv = Conv1d::<f64>::from_weights(spec, w.clone(), b.clone()).map_err(err)?;
        let got = conv.infer(&Tensor::from_vec(&[n, spec.in_ch, l], x.clone()).map_err(err)?).map_err(err)?;
        worst[0] = worst[0].max(max_diff(got.data(), &naive_conv(&x, &w, b.as_deref(), n, spec, l)));

        // batch norm (inference statistics)
        let c = r.random_range(1..6);
        let mut bn = BatchNorm1d::<f64>::new(BatchNormSpec::new(c));
        let (mean, var): (Vec<f64>, Vec<f64>) = (0..c).map(|_| (r.random_range(-1.0..1.0), r.random_range(0.1..3.0))).unzip();
        let (gamma, beta) = (rand_vec(&mut r, c), rand_vec(&mut r, c));
        bn.running_mean.data_mut().copy_from_slice(&mean);
        bn.running_var.data_mut().copy_from_slice(&var);
        bn.gamma.value.data_mut().copy_from_slice(&gamma);
        bn.beta.value.data_mut().copy_from_slice(&beta);
        let x = rand_vec(&mut r, n * c * l);
        let got = bn.infer(&Tensor::from_vec(&[n, c, l], x.clone()).map_err(err)?).map_err(err)?;
        let want: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / l) % c;
                (v - mean[ch]) / (var[ch] + bn.spec.eps).sqrt() * gamma[ch] + beta[ch]
            })
            .collect();
        worst[1] = worst[1].max(max_diff(got.data(), &want));

        // GAP
        let pooled = global_avg_pool(&Tensor::from_vec(&[n, c, l], x.clone()).map_err(err)?).map_err(err)?;
        let want: Vec<f64> = x.chunks(l).map(|row| row.iter().sum::<f64>() / l as f64).collect();
        worst[4] = worst[4].max(max_diff(pooled.data(), &want));

        // linear
        let (fi, fo) = (r.random_range(1..20), r.random_range(1..20));
        let w = rand_vec(&mut r, fi * fo);
        let b = rand_vec(&mut r, fo);
        let lin = Linear::<f64>::from_weights(fi, fo, w.clone(), b.clone()).map_err(err)?;
        let x = rand_vec(&mut r, n * fi);
        let got = lin.infer(&Tensor::from_vec(&[n, fi], x.clone()).map_err(err)?).map_err(err)?;
        let mut want = Vec::with_capacity(n * fo);
        for i in 0..n {
            for o in 0..fo {
                want.push(b[o] + (0..fi).map(|k| w[o * fi + k] * x[i * fi + k]).sum::<f64>());
            }
        }
        worst[2] = worst[2].max(max_diff(got.data(), &want));

        // LSTM
        let spec = LstmSpec { input: r.random_range(1..6), hidden: r.random_range(1..6), layers: r.random_range(1..4) };
        let lstm = Lstm::<f64>::new(spec, &mut r);
        let steps = r.random_range(1..8);
        let x = rand_vec(&mut r, steps * n * spec.input);
        let (got, _) = lstm.infer(&Tensor::from_vec(&[steps, n, spec.input], x.clone()).map_err(err)?, None).map_err(err)?;
        let h_dim = spec.hidden;
        let mut layer_in = x;
        let mut in_dim = spec.input;
        for layer in &lstm.layers {
            let (wih, whh) = (layer.w_ih.value.data(), layer.w_hh.value.data());
            let (bih, bhh) = (layer.b_ih.value.data(), layer.b_hh.value.data());
            let mut out = vec![0.0; steps * n * h_dim];
            for b in 0..n {
                let (mut h, mut c) = (vec![0.0; h_dim], vec![0.0; h_dim]);
                for t in 0..steps {
                    let xt = &layer_in[(t * n + b) * in_dim..(t * n + b + 1) * in_dim];
                    let gate = |g: usize, j: usize| {
                        let row = g * h_dim + j;
                        bih[row]
                            + bhh[row]
                            + (0..in_dim).map(|k| wih[row * in_dim + k] * xt[k]).sum::<f64>()
                            + (0..h_dim).map(|k| whh[row * h_dim + k] * h[k]).sum::<f64>()
                    };
                    let pre: Vec<[f64; 4]> = (0..h_dim).map(|j| [gate(0, j), gate(1, j), gate(2, j), gate(3, j)]).collect();
                    for j in 0..h_dim {
                        let [i, f, g, o] = pre[j];
                        c[j] = sigmoid(f) * c[j] + sigmoid(i) * g.tanh();
                        h[j] = sigmoid(o) * c[j].tanh();
                    }
                    out[(t * n + b) * h_dim..(t * n + b + 1) * h_dim].copy_from_slice(&h);
                }
            }
            layer_in = out;
            in_dim = h_dim;
        }
        worst[3] = worst[3].max(max_diff(got.data(), &layer_in));
    }
    Ok(worst)
}

pub fn forward_oracles() -> Check {
    let worst = forward_oracle_errors(100, 101)?;
    let names = ["conv", "batchnorm", "linear", "lstm", "gap"];
    for (name, e) in names.iter().zip(worst) {
        ensure!(e <= 1e-6, "{name} deviates from the naive reference by {e:.2e}");
    }
    Ok(format!(
        "100 random shapes each; max deviation conv {:.1e}, bn {:.1e}, linear {:.1e}, lstm {:.1e}, gap {:.1e}",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    ))
}

// ---------------------------------------------------------------- loss

pub fn loss_check() -> Check {
    let pred = Tensor::from_vec(&[1], vec![0.5f64]).map_err(err)?;
    let target = Tensor::from_vec(&[1], vec![1.0f64]).map_err(err)?;
    let (loss, _) = combined_seg_loss(&pred, &target, 0.8).map_err(err)?;
    ensure!((loss - 0.604518).abs() <= 1e-5, "loss {loss} != 0.604518");
    Ok(format!("combined loss at y=1, p=0.5, alpha=0.8 is {loss:.6}"))
}

// ---------------------------------------------------------------- windowing

pub fn windowing_arithmetic() -> Check {
    let p = WindowingParams::default();
    ensure!(p.sequence_span() == 2240, "span {} != 2240", p.sequence_span());
    ensure!((32 - 1) * 64 + 256 == 2240, "arithmetic");
    let per_session = extract_windows(3600, 256, p.train_stride).len();
    let total = 53 * per_session;
    ensure!((88_000..=90_500).contains(&total), "{total} windows outside 88,000..=90,500");
    Ok(format!("span 2240; 53 x 3600 points at stride 2 give {total} windows"))
}

// ---------------------------------------------------------------- labels

pub fn labeling_oracle() -> Check {
    let mut r = rng(2024);
    let mut windows = 0usize;
    for i in 0..1000u64 {
        let profile = SyntheticProfile {
            reps: r.random_range(1..=12),
            rep_duration: r.random_range(0.8..2.5),
            pause: r.random_range(0.1..1.0),
            lead_in: r.random_range(0.0..1.5),
            tail: r.random_range(0.0..1.0),
            seed: 9000 + i,
            ..SyntheticProfile::default()
        };
        let synth = generate_session(&profile).map_err(err)?;
        let series = preprocess(&synth.session, PreprocessOptions::default()).map_err(err)?;
        ensure!(series.marker_indices == synth.marker_indices, "session {i}: markers moved in preprocessing");
        let rir = rir_per_point(&series).map_err(err)?;
        ensure!(rir.values == synth.rir.values, "session {i}: RiR differs from generator truth");
        if series.len() < 256 {
            continue;
        }
        for _ in 0..5 {
            let start = r.random_range(0..=series.len() - 256);
            let near = synth.rir.values[start..start + 256].iter().filter(|&&v| v <= 2).count();
            ensure!(
                near_failure_label(&rir, start, 256) == (near * 2 > 256),
                "session {i} window {start}: label disagrees with point count {near}"
            );
            windows += 1;
        }
    }
    Ok(format!("1000 sessions: RiR equals generator truth; {windows} window labels match point counts"))
}

// ---------------------------------------------------------------- streaming

pub fn offline_online_equivalence() -> Check {
    let model = Arc::new(compact_model(5));
    let mut ticks = 0;
    let mut worst = 0.0f64;
    for i in 0..10u64 {
        let session = generate_session(&SyntheticProfile::sample(31, i)).map_err(err)?.session;
        let series = preprocess(&session, PreprocessOptions::default()).map_err(err)?;
        let offline = simulate_realtime_session(&series, &model).map_err(err)?;
        let mut live = LivePipeline::new(model.clone(), PreprocessOptions::default()).map_err(err)?;
        let mut online = Vec::new();
        for s in &session.samples {
            online.extend(live.push(s).map_err(err)?);
        }
        online.extend(live.finish().map_err(err)?);
        ensure!(online.len() == offline.ticks.len(), "session {i}: {} live ticks vs {} offline", online.len(), offline.ticks.len());
        let first = &offline.ticks[0];
        ensure!((first.time_s - 2.56).abs() < 1e-9, "first tick at {} s", first.time_s);
        for (k, (a, b)) in online.iter().zip(&offline.ticks).enumerate() {
            ensure!(a.tick == b.tick && a.end_index == b.end_index, "session {i} tick {k}: misaligned");
            ensure!(a.windows_used == b.windows_used, "session {i} tick {k}: window counts differ");
            if k > 0 {
                let cadence = b.time_s - offline.ticks[k - 1].time_s;
                ensure!((cadence - 0.64).abs() < 1e-9, "cadence {cadence}");
            }
            let d = (a.confidence as f64 - b.confidence as f64).abs();
            worst = worst.max(d);
            ensure!(d <= 1e-6, "session {i} tick {k}: confidence differs by {d:.2e}");
        }
        ticks += online.len();
    }
    Ok(format!("10 sessions, {ticks} ticks, max confidence difference {worst:.1e}; first tick 2.56 s, cadence 0.64 s"))
}

// ---------------------------------------------------------------- latency

pub fn latency_harness() -> Check {
    let model = compact_model(8);
    let report = bench_latency(&model, 32, 12, 3).map_err(err)?;
    ensure!(report.rows.len() == 32, "{} rows", report.rows.len());
    ensure!(report.rows.iter().all(|r| r.mean_ms > 0.0), "non-positive latency");
    ensure!(report.spearman > 0.0, "rank correlation {}", report.spearman);
    Ok(format!(
        "32 rows, overall mean {:.2} ms, 1 window {:.2} ms, 32 windows {:.2} ms, spearman {:.3}",
        report.overall_mean_ms, report.rows[0].mean_ms, report.rows[31].mean_ms, report.spearman
    ))
}

// ---------------------------------------------------------------- round trips

pub fn random_session(r: &mut ChaCha8Rng) -> Session {
    let n = r.random_range(1..400);
    let mut t = r.random_range(-100.0..100.0);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        t += r.random_range(0.0..0.05);
        let scale = 10f64.powi(r.random_range(-6..4));
        let values = std::array::from_fn(|_| r.random_range(-1.0..1.0) * scale);
        samples.push(RawSample::new(t, values));
    }
    let (t0, t1) = (samples[0].t, samples[n - 1].t);
    let mut markers: Vec<f64> = (0..r.random_range(0..6)).map(|_| r.random_range(t0..=t1)).collect();
    markers.sort_by(f64::total_cmp);
    markers.dedup();
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("exercise".to_string(), "preacher curl".to_string());
    meta.insert("note".to_string(), format!("k{}", r.random_range(0..1000)));
    Session { samples, markers, meta }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

pub fn session_round_trip(session: &Session) -> Result<(), String> {
    let (mut csv, mut markers, mut meta) = (Vec::new(), Vec::new(), Vec::new());
    encode_session(session, &mut csv, &mut markers, &mut meta).map_err(err)?;
    let mut back = decode_session(csv.as_slice()).map_err(err)?;
    back.markers = repsense::session::decode_markers(markers.as_slice()).map_err(err)?;
    back.meta = repsense::session::decode_meta(meta.as_slice()).map_err(err)?;
    ensure!(back.samples.len() == session.samples.len(), "sample count changed");
    for (a, b) in session.samples.iter().zip(&back.samples) {
        ensure!(close(a.t, b.t) && a.values.iter().zip(&b.values).all(|(x, y)| close(*x, *y)), "sample {a:?} became {b:?}");
    }
    ensure!(
        back.markers.len() == session.markers.len() && session.markers.iter().zip(&back.markers).all(|(a, b)| close(*a, *b)),
        "markers changed"
    );
    ensure!(back.meta == session.meta, "metadata changed");
    Ok(())
}

pub fn weights_round_trip(weights: &ModelWeights) -> Result<(), String> {
    let mut buf = Vec::new();
    write_weights(weights, &mut buf).map_err(err)?;
    let back = read_weights(buf.as_slice()).map_err(err)?;
    ensure!(back.metadata == weights.metadata, "metadata changed");
    ensure!(back.tensors.len() == weights.tensors.len(), "tensor count changed");
    for (a, b) in weights.tensors.iter().zip(&back.tensors) {
        ensure!(a.name == b.name && a.shape == b.shape, "tensor {} header changed", a.name);
        ensure!(
            a.data.iter().map(|v| v.to_bits()).eq(b.data.iter().map(|v| v.to_bits())),
            "tensor {} not bit-identical",
            a.name
        );
    }
    Ok(())
}

pub fn round_trips() -> Check {
    let mut r = rng(77);
    for _ in 0..200 {
        session_round_trip(&random_session(&mut r))?;
    }
    for seed in 0..5 {
        let mut mr = rng(seed);
        let seg_cfg = SegModelConfig {
            kernel: [3, 5, 7][mr.random_range(0..3)],
            stages: mr.random_range(1..4),
            blocks: mr.random_range(1..3),
            first_channels: mr.random_range(2..8),
            last_channels: 8,
            compact: true,
        };
        let cls_cfg = ClsModelConfig { skip_channels: 3, skip_kernel: 3, projection: 4, lstm_hidden: 5, lstm_layers: 2 };
        let mut seg = SegModel::new(seg_cfg.clone(), &mut mr).map_err(err)?;
        for (_, buf) in seg.named_buffers_mut() {
            buf.data_mut().iter_mut().for_each(|v| *v = mr.random_range(0.1..2.0));
        }
        weights_round_trip(&ModelWeights::from_seg(&seg, &ModelConfig { seg: seg_cfg, cls: cls_cfg.clone() }))?;
        let cls = ClsModel::new(cls_cfg, seg, &mut mr).map_err(err)?;
        let weights = ModelWeights::from_cls(&cls);
        weights_round_trip(&weights)?;
        let restored = weights.to_cls().map_err(err)?;
        ensure!(ModelWeights::from_cls(&restored) == weights, "restored classifier differs");
    }
    Ok("200 random sessions within 1e-9; 10 random weight files bit-identical".into())
}

// ---------------------------------------------------------------- end to end

pub const E2E_SEED: u64 = 7;
pub const E2E_SETS: usize = 50;
pub const E2E_TRAIN_SETS: usize = 40;

pub struct EndToEnd {
    pub seg_f1: f64,
    pub nf_f1: f64,
    pub seconds: f64,
}

pub fn run_end_to_end() -> Result<EndToEnd, String> {
    let t0 = Instant::now();
    let corpus = generate_corpus(E2E_SETS, E2E_SEED).map_err(err)?;
    let prepared = corpus
        .iter()
        .enumerate()
        .map(|(i, s)| PreparedSession::from_session(i, &s.session))
        .collect::<repsense::Result<Vec<_>>>()
        .map_err(err)?;
    let cfg = TrainConfig::desk();
    let (fit, val) = split_sessions(E2E_TRAIN_SETS, cfg.train_fraction, E2E_SEED).map_err(err)?;
    let fit: Vec<_> = fit.iter().map(|&i| prepared[i].clone()).collect();
    let val: Vec<_> = val.iter().map(|&i| prepared[i].clone()).collect();
    let model_cfg = ModelConfig::compact();
    let seg = train_segmentation(&fit, &val, &model_cfg.seg, &cfg).map_err(err)?;
    let cls = train_classification(&fit, &val, &seg.model, &model_cfg.cls, &cfg).map_err(err)?;
    let held: Vec<_> =
        (E2E_TRAIN_SETS..E2E_SETS).map(|i| (format!("set_{i:03}"), prepared[i].series.clone())).collect();
    let report = evaluate(&held, &cls.model).map_err(err)?;
    Ok(EndToEnd { seg_f1: report.mean_seg_f1, nf_f1: report.mean_nf_f1, seconds: t0.elapsed().as_secs_f64() })
}

pub fn end_to_end() -> Check {
    let r = run_end_to_end()?;
    let detail = format!(
        "held-out segmentation F1 {:.3} (>= 0.80), near-failure F1 {:.3} (>= 0.75), {:.0} s (target < 1800 s)",
        r.seg_f1, r.nf_f1, r.seconds
    );
    ensure!(r.seg_f1 >= 0.80 && r.nf_f1 >= 0.75, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- gradients

const GRAD_H: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
/// Floor of the relative-error denominator. Central differences at h = 1e-5
/// carry about 1e-11 of rounding noise, which would swamp the relative error
/// of near-zero gradients.
const GRAD_FLOOR: f64 = 1e-6;

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

/// Compares the gradients already accumulated in `model` with central
/// differences of `loss` at every entry of every trainable tensor. Returns
/// the number of entries and the worst relative error.
pub fn finite_difference_check<M: Module<f64>>(model: &mut M, loss: impl Fn(&mut M) -> f64) -> Result<(usize, f64), String> {
    let analytic: Vec<(usize, Vec<f64>)> = model
        .named_params()
        .into_iter()
        .enumerate()
        .filter(|(_, (_, p))| p.trainable)
        .map(|(k, (_, p))| (k, p.grad.clone()))
        .collect();
    let (mut checked, mut worst) = (0, 0.0f64);
    for (k, grad) in analytic {
        for (i, &g) in grad.iter().enumerate() {
            let orig = model.named_params()[k].1.value.data()[i];
            let eval_at = |m: &mut M, v: f64| {
                m.named_params_mut()[k].1.value.data_mut()[i] = v;
                loss(m)
            };
            let up = eval_at(model, orig + GRAD_H);
            let down = eval_at(model, orig - GRAD_H);
            eval_at(model, orig);
            let numeric = (up - down) / (2.0 * GRAD_H);
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
            if rel >= GRAD_REL_TOL {
                let name = model.named_params()[k].0.clone();
                return Err(format!("{name}[{i}]: analytic {g:e} numeric {numeric:e} rel {rel:.2e}"));
            }
            checked += 1;
        }
    }
    Ok((checked, worst))
}

pub fn mini_seg(r: &mut ChaCha8Rng) -> SegModel<f64> {
    let cfg = SegModelConfig { kernel: 5, stages: 2, blocks: 2, first_channels: 3, last_channels: 6, compact: true };
    SegModel::new(cfg, r).unwrap()
}

pub fn seg_gradients() -> Result<(usize, f64), String> {
    let mut r = rng(11);
    let mut model = mini_seg(&mut r);
    let x = random_tensor(&mut r, &[3, CHANNELS, WINDOW_LEN], 2.0);
    let target = Tensor::from_vec(&[3, WINDOW_LEN], (0..3 * WINDOW_LEN).map(|i| ((i / 7) % 2) as f64).collect()).unwrap();
    model.zero_grad();
    let out = model.forward(&x, Mode::Train).map_err(err)?;
    let (_, grad) = combined_seg_loss(&out.confidences, &target, 0.8).map_err(err)?;
    model.backward(&grad).map_err(err)?;
    finite_difference_check(&mut model, |m| {
        let out = m.forward(&x, Mode::Train).unwrap();
        combined_seg_loss(&out.confidences, &target, 0.8).unwrap().0
    })
}

pub fn cls_gradients() -> Result<(usize, f64), String> {
    let mut r = rng(12);
    let seg = mini_seg(&mut r);
    let cfg = ClsModelConfig { skip_channels: 4, skip_kernel: 3, projection: 5, lstm_hidden: 4, lstm_layers: 2 };
    let mut model = ClsModel::new(cfg, seg, &mut r).map_err(err)?;
    // Two sequences: three windows and a padded one of two.
    let slots = vec![(0, 0), (1, 0), (2, 0), (0, 1), (1, 1)];
    let raw = random_tensor(&mut r, &[slots.len(), CHANNELS, WINDOW_LEN], 2.0);
    let (_, seg_features, _) = model.seg_features(&raw).map_err(err)?;
    let batch = ClsBatch { raw, seg_features, slots, steps: 3, sequences: 2 };
    let labels = Tensor::from_vec(&[5], vec![0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
    model.zero_grad();
    let p = model.forward_train(&batch).map_err(err)?;
    let (_, grad) = bce_loss(&Tensor::from_vec(&[5], p).unwrap(), &labels).map_err(err)?;
    model.backward_train(grad.data()).map_err(err)?;
    let frozen: f64 =
        model.named_params().iter().filter(|(_, p)| !p.trainable).flat_map(|(_, p)| p.grad.iter()).map(|g| g.abs()).sum();
    ensure!(frozen == 0.0, "frozen parameters received gradient");
    finite_difference_check(&mut model, |m| {
        let p = m.forward_train(&batch).unwrap();
        bce_loss(&Tensor::from_vec(&[5], p).unwrap(), &labels).unwrap().0
    })
}

pub fn gradient_check() -> Check {
    let (seg_n, seg_worst) = seg_gradients()?;
    let (cls_n, cls_worst) = cls_gradients()?;
    Ok(format!(
        "every trainable entry: segmentation {seg_n} (worst rel {seg_worst:.1e}), classifier {cls_n} (worst rel {cls_worst:.1e})"
    ))
}
