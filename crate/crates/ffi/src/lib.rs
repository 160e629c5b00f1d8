//! C interface to the live near-failure engine.
//!
//! Every function returns an [`RsStatus`]; on failure a message is available
//! from [`rs_last_error`] on the same thread. Handles are opaque and must be
//! released with [`rs_engine_free`].

use std::cell::RefCell;
use std::collections::VecDeque;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repsense::error::Error;
use repsense::models::{load_weights, ClsModel, ModelConfig, SegModel};
use repsense::session::RawSample;
use repsense::signal::PreprocessOptions;
use repsense::streaming::{LivePipeline, PredictionEvent};

/// Rep-end indices carried inline by one [`RsEvent`].
pub const RS_MAX_MARKERS: usize = 8;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsStatus {
    Ok = 0,
    NullPointer = 1,
    Io = 2,
    Format = 3,
    Parse = 4,
    Validation = 5,
    State = 6,
    Version = 7,
    InvalidUtf8 = 8,
    Panic = 9,
}

impl From<&Error> for RsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io(_) => RsStatus::Io,
            Error::Format(_) => RsStatus::Format,
            Error::Parse { .. } => RsStatus::Parse,
            Error::Validation(_) => RsStatus::Validation,
            Error::State(_) => RsStatus::State,
            Error::Version { .. } => RsStatus::Version,
        }
    }
}

/// One classifier tick.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RsEvent {
    pub tick: u64,
    pub wall_time_ms: f64,
    pub windows_used: u32,
    pub confidence: f32,
    pub near_failure: bool,
    /// Rep ends detected this tick; only the first `RS_MAX_MARKERS` are stored.
    pub marker_count: u32,
    pub markers: [u64; RS_MAX_MARKERS],
    pub latency_ms: f64,
    pub end_index: u64,
}

impl From<&PredictionEvent> for RsEvent {
    fn from(e: &PredictionEvent) -> Self {
        let mut markers = [0u64; RS_MAX_MARKERS];
        for (slot, &m) in markers.iter_mut().zip(&e.new_markers) {
            *slot = m as u64;
        }
        RsEvent {
            tick: e.tick,
            wall_time_ms: e.wall_time_ms,
            windows_used: e.windows_used as u32,
            confidence: e.confidence,
            near_failure: e.near_failure,
            marker_count: e.new_markers.len() as u32,
            markers,
            latency_ms: e.latency_ms,
            end_index: e.end_index as u64,
        }
    }
}

/// Opaque engine handle.
pub struct RsEngine {
    pipeline: LivePipeline,
    events: VecDeque<PredictionEvent>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), (RsStatus, String)>) -> RsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RsStatus::Panic
        }
    }
}

fn lift(e: Error) -> (RsStatus, String) {
    (RsStatus::from(&e), e.to_string())
}

fn null(what: &str) -> (RsStatus, String) {
    (RsStatus::NullPointer, format!("{what} is null"))
}

fn new_engine(model: ClsModel<f32>, remap_watch: bool) -> Result<Box<RsEngine>, Error> {
    let opts = PreprocessOptions { remap_watch, ..PreprocessOptions::default() };
    Ok(Box::new(RsEngine { pipeline: LivePipeline::new(Arc::new(model), opts)?, events: VecDeque::new() }))
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Opens an engine from a classifier weight file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rs_engine_open(path: *const c_char, remap_watch: bool, out: *mut *mut RsEngine) -> RsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| (RsStatus::InvalidUtf8, "path is not UTF-8".into()))?;
        let model = load_weights(Path::new(path)).and_then(|w| w.to_cls()).map_err(lift)?;
        *out = Box::into_raw(new_engine(model, remap_watch).map_err(lift)?);
        Ok(())
    })
}

/// Opens an engine around a freshly initialized compact model. Useful for
/// integration testing without weight files.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rs_engine_new_untrained(seed: u64, out: *mut *mut RsEngine) -> RsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ModelConfig::compact();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seg = SegModel::new(cfg.seg, &mut rng).map_err(lift)?;
        let model = ClsModel::new(cfg.cls, seg, &mut rng).map_err(lift)?;
        *out = Box::into_raw(new_engine(model, false).map_err(lift)?);
        Ok(())
    })
}

/// Feeds one raw sample: time in seconds, then ax, ay, az, gx, gy, gz.
///
/// # Safety
/// `engine` must come from an `rs_engine_*` constructor and `values` must
/// point to 6 doubles.
#[no_mangle]
pub unsafe extern "C" fn rs_engine_push(engine: *mut RsEngine, t: f64, values: *const f64) -> RsStatus {
    guard(|| {
        let engine = engine.as_mut().ok_or_else(|| null("engine"))?;
        if values.is_null() {
            return Err(null("values"));
        }
        let mut v = [0.0; 6];
        v.copy_from_slice(std::slice::from_raw_parts(values, 6));
        if !t.is_finite() || v.iter().any(|x| !x.is_finite()) {
            return Err((RsStatus::Validation, "sample has a non-finite field".into()));
        }
        let events = engine.pipeline.push(&RawSample::new(t, v)).map_err(lift)?;
        engine.events.extend(events);
        Ok(())
    })
}

/// Flushes buffered samples at the end of a recording.
///
/// # Safety
/// `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rs_engine_finish(engine: *mut RsEngine) -> RsStatus {
    guard(|| {
        let engine = engine.as_mut().ok_or_else(|| null("engine"))?;
        let events = engine.pipeline.finish().map_err(lift)?;
        engine.events.extend(events);
        Ok(())
    })
}

/// Number of queued events.
///
/// # Safety
/// `engine` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn rs_engine_pending(engine: *const RsEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.events.len())
}

/// Pops the oldest queued event into `out`. `has_event` is set to false
/// when the queue is empty.
///
/// # Safety
/// `engine` must be a live handle; `out` and `has_event` writable.
#[no_mangle]
pub unsafe extern "C" fn rs_engine_poll(engine: *mut RsEngine, out: *mut RsEvent, has_event: *mut bool) -> RsStatus {
    guard(|| {
        let engine = engine.as_mut().ok_or_else(|| null("engine"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if has_event.is_null() {
            return Err(null("has_event"));
        }
        match engine.events.pop_front() {
            Some(e) => {
                *out = RsEvent::from(&e);
                *has_event = true;
            }
            None => *has_event = false,
        }
        Ok(())
    })
}

/// Releases an engine. Null is ignored.
///
/// # Safety
/// `engine` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rs_engine_free(engine: *mut RsEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}
