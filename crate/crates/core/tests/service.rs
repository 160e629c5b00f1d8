//! Drives a live recording through the socket endpoint.

mod common;

use std::sync::Arc;

use futures_util::{SinkExt, StreamExt};
use repsense::eval::simulate_realtime_session;
use repsense::service::{serve, AppState, Ingest};
use repsense::session::read_session;
use repsense::signal::{preprocess, PreprocessOptions};
use repsense::synth::{generate_session, SyntheticProfile};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio_tungstenite::tungstenite::Message;

type Socket = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn connect(addr: std::net::SocketAddr) -> Socket {
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap();
    ws
}

async fn recv(ws: &mut Socket) -> Value {
    loop {
        let msg = tokio::time::timeout(std::time::Duration::from_secs(30), ws.next()).await.unwrap().unwrap().unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

async fn send(ws: &mut Socket, v: Value) {
    ws.send(Message::text(v.to_string())).await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn live_recording_persists_and_matches_replay() {
    let dir = tempfile::tempdir().unwrap();
    let model = Arc::new(common::compact_model(3));
    let state = AppState::new(Ingest::new(Some(model.clone()), Some(dir.path().to_path_buf())));
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, state));

    let mut watcher = connect(addr).await;
    assert_eq!(recv(&mut watcher).await["kind"], "status");
    let mut recorder = connect(addr).await;
    assert_eq!(recv(&mut recorder).await["state"], "idle");

    let session = generate_session(&SyntheticProfile { reps: 4, ..SyntheticProfile::default() }).unwrap().session;
    send(&mut recorder, json!({"kind": "start", "session_id": "it-1", "meta": {"exercise": "curl"}})).await;
    for chunk in session.samples.chunks(64) {
        let samples: Vec<Value> = chunk
            .iter()
            .map(|s| {
                let [ax, ay, az, gx, gy, gz] = s.values;
                json!({"t": s.t, "ax": ax, "ay": ay, "az": az, "gx": gx, "gy": gy, "gz": gz})
            })
            .collect();
        send(&mut recorder, json!({"kind": "sample_batch", "session_id": "it-1", "samples": samples})).await;
    }
    for &t in &session.markers {
        send(&mut recorder, json!({"kind": "marker", "session_id": "it-1", "t": t})).await;
    }
    send(&mut recorder, json!({"kind": "stop", "session_id": "it-1"})).await;

    let mut predictions = Vec::new();
    let saved_to = loop {
        let msg = recv(&mut watcher).await;
        assert_ne!(msg["kind"], "error", "{msg}");
        if msg["kind"] == "prediction" {
            predictions.push(msg);
        } else if msg["kind"] == "status" && msg["state"] == "idle" {
            break msg["saved_to"].as_str().unwrap().to_string();
        }
    };
    assert_eq!(predictions.len(), saved_count(&predictions));

    // The recorder sees its own broadcasts and no errors.
    loop {
        let msg = recv(&mut recorder).await;
        assert_ne!(msg["kind"], "error", "{msg}");
        if msg["kind"] == "status" && msg["state"] == "idle" {
            break;
        }
    }

    let stored = read_session(std::path::Path::new(&saved_to)).unwrap();
    assert_eq!(stored.samples.len(), session.samples.len());
    for (a, b) in stored.samples.iter().zip(&session.samples) {
        assert!((a.t - b.t).abs() <= 1e-9 * b.t.abs().max(1.0));
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
    }
    assert_eq!(stored.markers.len(), session.markers.len());
    assert_eq!(stored.meta.get("exercise").map(String::as_str), Some("curl"));

    let replay = simulate_realtime_session(&preprocess(&stored, PreprocessOptions::for_session(&stored)).unwrap(), &model).unwrap();
    assert_eq!(predictions.len(), replay.ticks.len());
    for (p, r) in predictions.iter().zip(&replay.ticks) {
        assert_eq!(p["tick"].as_u64().unwrap(), r.tick);
        assert_eq!(p["windows_used"].as_u64().unwrap() as usize, r.windows_used);
        assert!((p["confidence"].as_f64().unwrap() - r.confidence as f64).abs() <= 1e-6);
    }
}

/// Tick ids must arrive strictly increasing; returns how many did.
fn saved_count(predictions: &[Value]) -> usize {
    let ticks: Vec<u64> = predictions.iter().map(|p| p["tick"].as_u64().unwrap()).collect();
    assert!(ticks.windows(2).all(|w| w[0] < w[1]));
    ticks.len()
}

#[tokio::test]
async fn bad_batches_are_rejected_to_the_sender_only() {
    let state = AppState::new(Ingest::new(None, None));
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, state));

    let mut ws = connect(addr).await;
    recv(&mut ws).await;
    send(&mut ws, json!({"kind": "hello", "version": 1})).await;
    assert_eq!(recv(&mut ws).await["kind"], "hello");
    assert_eq!(recv(&mut ws).await["kind"], "status");
    send(&mut ws, json!({"kind": "start"})).await;
    let status = recv(&mut ws).await;
    assert_eq!(status["state"], "recording");
    assert!(status["session_id"].as_str().unwrap().starts_with("live-"));
    send(&mut ws, json!({"kind": "sample_batch", "samples": [{"t": 0, "ax": 0, "ay": 0, "az": 0, "gx": "x", "gy": 0, "gz": 0}]})).await;
    let err = recv(&mut ws).await;
    assert_eq!(err["kind"], "error");
    assert_eq!(err["field"], "samples[0].gx");
    send(&mut ws, json!({"kind": "bogus"})).await;
    assert_eq!(recv(&mut ws).await["field"], "kind");
    ws.send(Message::binary(vec![1, 2, 3])).await.unwrap();
    assert_eq!(recv(&mut ws).await["kind"], "error");
}
