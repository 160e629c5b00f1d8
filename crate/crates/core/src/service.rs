//! Live ingestion over WebSocket: one recording at a time, predictions fanned
//! out to every connected subscriber. The message format is described in
//! `docs/wire-protocol.md`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc};

use crate::error::Result;
use crate::models::ClsModel;
use crate::session::{write_session, RawSample, Session};
use crate::signal::PreprocessOptions;
use crate::streaming::{LivePipeline, PredictionEvent};

pub const PROTOCOL_VERSION: u32 = 1;
/// Samples accepted in one `sample_batch`.
pub const MAX_BATCH: usize = 64;
/// Messages buffered per subscriber before the oldest are dropped.
pub const SUBSCRIBER_QUEUE: usize = 256;

const SAMPLE_FIELDS: [&str; 7] = ["t", "ax", "ay", "az", "gx", "gy", "gz"];

/// A message sent by a recording client.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientMessage {
    Hello { version: u32 },
    Start { session_id: Option<String>, meta: BTreeMap<String, String> },
    SampleBatch { session_id: Option<String>, samples: Vec<RawSample> },
    Marker { session_id: Option<String>, t: f64 },
    Stop { session_id: Option<String> },
}

/// Rejected client message. `field` names the offending JSON field.
#[derive(Debug, Clone, PartialEq)]
pub struct WireError {
    pub message: String,
    pub field: Option<String>,
}

impl WireError {
    fn new(message: impl Into<String>) -> Self {
        Self { message: message.into(), field: None }
    }

    fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { message: message.into(), field: Some(field.into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecorderState {
    Idle,
    Recording,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusPayload {
    pub state: RecorderState,
    pub session_id: Option<String>,
    pub samples: usize,
    pub markers: usize,
    pub ticks: u64,
    /// Rep ends detected by the model during the current or last recording.
    pub reps_detected: usize,
    pub model_loaded: bool,
    /// Messages dropped for slow subscribers since the server started.
    pub dropped: u64,
    /// Where the last stopped recording was written.
    pub saved_to: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPayload {
    pub session_id: String,
    #[serde(flatten)]
    pub event: PredictionEvent,
}

/// A message sent by the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello { version: u32, server: String },
    Status(StatusPayload),
    Prediction(PredictionPayload),
    Error { message: String, field: Option<String> },
}

impl ServerMessage {
    fn error(e: WireError) -> Self {
        ServerMessage::Error { message: e.message, field: e.field }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

fn opt_string(obj: &serde_json::Map<String, Value>, key: &str) -> std::result::Result<Option<String>, WireError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(WireError::field(key, format!("field '{key}' must be a string"))),
    }
}

fn number(obj: &serde_json::Map<String, Value>, key: &str, path: &str) -> std::result::Result<f64, WireError> {
    match obj.get(key) {
        None => Err(WireError::field(path, format!("missing field '{path}'"))),
        Some(v) => match v.as_f64() {
            Some(x) if x.is_finite() => Ok(x),
            _ => Err(WireError::field(path, format!("field '{path}' must be a finite number"))),
        },
    }
}

/// Parses one text frame from a client.
pub fn parse_client_message(text: &str) -> std::result::Result<ClientMessage, WireError> {
    let value: Value = serde_json::from_str(text).map_err(|e| WireError::new(format!("invalid JSON: {e}")))?;
    let obj = value.as_object().ok_or_else(|| WireError::new("message must be a JSON object"))?;
    let kind = match obj.get("kind") {
        Some(Value::String(k)) => k.as_str(),
        Some(_) => return Err(WireError::field("kind", "field 'kind' must be a string")),
        None => return Err(WireError::field("kind", "missing field 'kind'")),
    };
    let session_id = opt_string(obj, "session_id")?;
    match kind {
        "hello" => {
            let version = match obj.get("version") {
                None => PROTOCOL_VERSION,
                Some(v) => v
                    .as_u64()
                    .and_then(|v| u32::try_from(v).ok())
                    .ok_or_else(|| WireError::field("version", "field 'version' must be a non-negative integer"))?,
            };
            Ok(ClientMessage::Hello { version })
        }
        "start" => {
            let mut meta = BTreeMap::new();
            match obj.get("meta") {
                None | Some(Value::Null) => {}
                Some(Value::Object(m)) => {
                    for (k, v) in m {
                        let v = v
                            .as_str()
                            .ok_or_else(|| WireError::field(format!("meta.{k}"), format!("meta value '{k}' must be a string")))?;
                        meta.insert(k.clone(), v.to_string());
                    }
                }
                Some(_) => return Err(WireError::field("meta", "field 'meta' must be an object")),
            }
            Ok(ClientMessage::Start { session_id, meta })
        }
        "sample_batch" => {
            let arr = match obj.get("samples") {
                Some(Value::Array(a)) => a,
                Some(_) => return Err(WireError::field("samples", "field 'samples' must be an array")),
                None => return Err(WireError::field("samples", "missing field 'samples'")),
            };
            if arr.is_empty() || arr.len() > MAX_BATCH {
                return Err(WireError::field(
                    "samples",
                    format!("a batch holds 1..={MAX_BATCH} samples, got {}", arr.len()),
                ));
            }
            let mut samples = Vec::with_capacity(arr.len());
            for (i, s) in arr.iter().enumerate() {
                let so = s
                    .as_object()
                    .ok_or_else(|| WireError::field(format!("samples[{i}]"), "sample must be an object"))?;
                let mut row = [0.0; 7];
                for (slot, name) in row.iter_mut().zip(SAMPLE_FIELDS) {
                    *slot = number(so, name, &format!("samples[{i}].{name}"))?;
                }
                samples.push(RawSample::new(row[0], [row[1], row[2], row[3], row[4], row[5], row[6]]));
            }
            Ok(ClientMessage::SampleBatch { session_id, samples })
        }
        "marker" => Ok(ClientMessage::Marker { session_id, t: number(obj, "t", "t")? }),
        "stop" => Ok(ClientMessage::Stop { session_id }),
        other => Err(WireError::field("kind", format!("unknown message kind '{other}'"))),
    }
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

struct Recording {
    id: String,
    session: Session,
    pipeline: Option<LivePipeline>,
    ticks: u64,
    reps: usize,
    last_tick: Option<u64>,
}

/// What a handled message produced: replies for the sender only and
/// messages for every subscriber.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Outcome {
    pub reply: Vec<ServerMessage>,
    pub broadcast: Vec<ServerMessage>,
}

impl Outcome {
    fn error(e: WireError) -> Self {
        Self { reply: vec![ServerMessage::error(e)], broadcast: Vec::new() }
    }
}

/// The recorder state machine, independent of any transport.
pub struct Ingest {
    model: Option<Arc<ClsModel<f32>>>,
    out_dir: Option<PathBuf>,
    active: Option<Recording>,
    last: Option<(String, usize, usize, u64, usize, Option<String>)>,
    counter: u64,
    dropped: Arc<AtomicU64>,
}

impl Ingest {
    /// `out_dir` receives stopped recordings; `None` keeps nothing.
    pub fn new(model: Option<Arc<ClsModel<f32>>>, out_dir: Option<PathBuf>) -> Self {
        Self { model, out_dir, active: None, last: None, counter: 0, dropped: Arc::new(AtomicU64::new(0)) }
    }

    pub fn is_recording(&self) -> bool {
        self.active.is_some()
    }

    pub fn status(&self) -> StatusPayload {
        let dropped = self.dropped.load(Ordering::Relaxed);
        let model_loaded = self.model.is_some();
        match (&self.active, &self.last) {
            (Some(r), _) => StatusPayload {
                state: RecorderState::Recording,
                session_id: Some(r.id.clone()),
                samples: r.session.samples.len(),
                markers: r.session.markers.len(),
                ticks: r.ticks,
                reps_detected: r.reps,
                model_loaded,
                dropped,
                saved_to: None,
            },
            (None, Some((id, samples, markers, ticks, reps, saved))) => StatusPayload {
                state: RecorderState::Idle,
                session_id: Some(id.clone()),
                samples: *samples,
                markers: *markers,
                ticks: *ticks,
                reps_detected: *reps,
                model_loaded,
                dropped,
                saved_to: saved.clone(),
            },
            (None, None) => StatusPayload {
                state: RecorderState::Idle,
                session_id: None,
                samples: 0,
                markers: 0,
                ticks: 0,
                reps_detected: 0,
                model_loaded,
                dropped,
                saved_to: None,
            },
        }
    }

    /// Parses and handles one text frame.
    pub fn handle_text(&mut self, text: &str) -> Outcome {
        match parse_client_message(text) {
            Ok(msg) => self.handle(msg),
            Err(e) => Outcome::error(e),
        }
    }

    pub fn handle(&mut self, msg: ClientMessage) -> Outcome {
        match msg {
            ClientMessage::Hello { version } => {
                if version > PROTOCOL_VERSION {
                    return Outcome::error(WireError::field(
                        "version",
                        format!("protocol version {version} not supported (max {PROTOCOL_VERSION})"),
                    ));
                }
                Outcome {
                    reply: vec![
                        ServerMessage::Hello { version: PROTOCOL_VERSION, server: format!("repsense {}", env!("CARGO_PKG_VERSION")) },
                        ServerMessage::Status(self.status()),
                    ],
                    broadcast: Vec::new(),
                }
            }
            ClientMessage::Start { session_id, meta } => self.start(session_id, meta),
            ClientMessage::SampleBatch { session_id, samples } => self.samples(session_id, samples),
            ClientMessage::Marker { session_id, t } => self.marker(session_id, t),
            ClientMessage::Stop { session_id } => self.stop(session_id),
        }
    }

    fn check_session(&self, session_id: &Option<String>) -> std::result::Result<(), WireError> {
        let active = self.active.as_ref().ok_or_else(|| WireError::new("no recording in progress"))?;
        match session_id {
            Some(id) if *id != active.id => {
                Err(WireError::field("session_id", format!("session '{id}' is not the active recording '{}'", active.id)))
            }
            _ => Ok(()),
        }
    }

    fn start(&mut self, session_id: Option<String>, meta: BTreeMap<String, String>) -> Outcome {
        if let Some(r) = &self.active {
            return Outcome::error(WireError::new(format!("recording '{}' already in progress", r.id)));
        }
        let id = match session_id {
            Some(id) if !valid_session_id(&id) => {
                return Outcome::error(WireError::field("session_id", "session ids use 1-64 characters from [A-Za-z0-9_-]"))
            }
            Some(id) => id,
            None => {
                self.counter += 1;
                let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
                format!("live-{secs}-{:03}", self.counter)
            }
        };
        let session = Session { samples: Vec::new(), markers: Vec::new(), meta };
        if let Err(e) = session.validate() {
            return Outcome::error(WireError::field("meta", e.to_string()));
        }
        let pipeline = match &self.model {
            Some(m) => match LivePipeline::new(m.clone(), PreprocessOptions::for_session(&session)) {
                Ok(p) => Some(p),
                Err(e) => return Outcome::error(WireError::new(e.to_string())),
            },
            None => None,
        };
        log::info!("recording {id} started");
        self.active = Some(Recording { id, session, pipeline, ticks: 0, reps: 0, last_tick: None });
        Outcome { reply: Vec::new(), broadcast: vec![ServerMessage::Status(self.status())] }
    }

    fn publish(rec: &mut Recording, events: Vec<PredictionEvent>, out: &mut Vec<ServerMessage>) {
        for event in events {
            if rec.last_tick.is_some_and(|t| event.tick <= t) {
                continue;
            }
            rec.last_tick = Some(event.tick);
            rec.ticks += 1;
            rec.reps += event.new_markers.len();
            out.push(ServerMessage::Prediction(PredictionPayload { session_id: rec.id.clone(), event }));
        }
    }

    fn samples(&mut self, session_id: Option<String>, samples: Vec<RawSample>) -> Outcome {
        if let Err(e) = self.check_session(&session_id) {
            return Outcome::error(e);
        }
        let rec = self.active.as_mut().expect("checked above");
        let mut prev = rec.session.samples.last().map(|s| s.t);
        for (i, s) in samples.iter().enumerate() {
            if prev.is_some_and(|p| s.t < p) {
                return Outcome::error(WireError::field(format!("samples[{i}].t"), "timestamps must not decrease"));
            }
            prev = Some(s.t);
        }
        let mut out = Outcome::default();
        for s in samples {
            rec.session.samples.push(s);
            if let Some(p) = rec.pipeline.as_mut() {
                match p.push(&s) {
                    Ok(events) => Self::publish(rec, events, &mut out.broadcast),
                    Err(e) => {
                        out.reply.push(ServerMessage::error(WireError::new(e.to_string())));
                        return out;
                    }
                }
            }
        }
        out
    }

    fn marker(&mut self, session_id: Option<String>, t: f64) -> Outcome {
        if let Err(e) = self.check_session(&session_id) {
            return Outcome::error(e);
        }
        let rec = self.active.as_mut().expect("checked above");
        if rec.session.markers.last().is_some_and(|&m| t <= m) {
            return Outcome::error(WireError::field("t", "markers must be strictly increasing"));
        }
        if rec.session.samples.first().is_some_and(|s| t < s.t) {
            return Outcome::error(WireError::field("t", "marker precedes the first sample"));
        }
        rec.session.markers.push(t);
        Outcome { reply: Vec::new(), broadcast: vec![ServerMessage::Status(self.status())] }
    }

    fn stop(&mut self, session_id: Option<String>) -> Outcome {
        if let Err(e) = self.check_session(&session_id) {
            return Outcome::error(e);
        }
        let mut rec = self.active.take().expect("checked above");
        let mut out = Outcome::default();
        if let Some(p) = rec.pipeline.as_mut() {
            match p.finish() {
                Ok(events) => Self::publish(&mut rec, events, &mut out.broadcast),
                Err(e) => out.reply.push(ServerMessage::error(WireError::new(e.to_string()))),
            }
        }
        // Markers outside the sampled span cannot be stored.
        let span = rec.session.samples.first().zip(rec.session.samples.last()).map(|(a, b)| (a.t, b.t));
        let before = rec.session.markers.len();
        rec.session.markers.retain(|&m| span.is_some_and(|(a, b)| m >= a && m <= b));
        if rec.session.markers.len() < before {
            log::warn!("{}: dropped {} markers outside the recording", rec.id, before - rec.session.markers.len());
        }
        let mut saved = None;
        if let Some(dir) = &self.out_dir {
            let base = dir.join(&rec.id);
            match write_session(&base, &rec.session) {
                Ok(_) => saved = Some(base.display().to_string()),
                Err(e) => out.reply.push(ServerMessage::error(WireError::new(format!("could not save recording: {e}")))),
            }
        }
        log::info!("recording {} stopped: {} samples, {} ticks", rec.id, rec.session.samples.len(), rec.ticks);
        self.last = Some((rec.id, rec.session.samples.len(), rec.session.markers.len(), rec.ticks, rec.reps, saved));
        out.broadcast.push(ServerMessage::Status(self.status()));
        out
    }
}

/// Shared server state.
pub struct AppState {
    ingest: Mutex<Ingest>,
    tx: broadcast::Sender<Arc<String>>,
    dropped: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(ingest: Ingest) -> Arc<Self> {
        let (tx, _) = broadcast::channel(SUBSCRIBER_QUEUE);
        let dropped = ingest.dropped.clone();
        Arc::new(Self { ingest: Mutex::new(ingest), tx, dropped })
    }

    /// Sends to every subscriber; returns how many received it.
    pub fn publish(&self, msg: &ServerMessage) -> usize {
        self.tx.send(Arc::new(msg.to_json())).unwrap_or(0)
    }

    pub fn subscriber_count(&self) -> usize {
        self.tx.receiver_count()
    }

    fn status_json(&self) -> String {
        ServerMessage::Status(self.ingest.lock().expect("ingest lock").status()).to_json()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/ws", get(ws_handler))
        .route("/health", get(|| async { "ok" }))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> Result<()> {
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    if let Some(a) = addr {
        log::info!("listening on ws://{a}/ws");
    }
    axum::serve(listener, router(state)).await?;
    Ok(())
}

async fn ws_handler(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| handle_socket(socket, state))
}

async fn handle_socket(socket: WebSocket, state: Arc<AppState>) {
    let (mut sink, mut stream) = socket.split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<String>();
    // Subscribe before taking the snapshot so no tick falls in between.
    let mut sub = state.tx.subscribe();
    let _ = out_tx.send(state.status_json());

    let writer = tokio::spawn(async move {
        while let Some(text) = out_rx.recv().await {
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    });

    let fwd_tx = out_tx.clone();
    let fwd_state = state.clone();
    let forwarder = tokio::spawn(async move {
        loop {
            match sub.recv().await {
                Ok(text) => {
                    if fwd_tx.send(text.as_ref().clone()).is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    fwd_state.dropped.fetch_add(n, Ordering::Relaxed);
                    log::warn!("subscriber lagged, dropped {n} messages");
                    if fwd_tx.send(fwd_state.status_json()).is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Closed) => break,
            }
        }
    });

    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Binary(_) => {
                let err = ServerMessage::Error { message: "binary frames are not supported".into(), field: None };
                let _ = out_tx.send(err.to_json());
                continue;
            }
            Message::Close(_) => break,
            _ => continue,
        };
        let outcome = state.ingest.lock().expect("ingest lock").handle_text(&text);
        for m in &outcome.reply {
            let _ = out_tx.send(m.to_json());
        }
        for m in &outcome.broadcast {
            state.publish(m);
        }
    }
    forwarder.abort();
    drop(out_tx);
    let _ = writer.await;
}
