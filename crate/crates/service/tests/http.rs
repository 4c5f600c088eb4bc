use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use avit_core::corpus::{CorpusConfig, Split};
use avit_core::pipeline::{run_all, Models, RunConfig};
use avit_service::{router, ServiceState};
use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use serde_json::{json, Value};
use tower::ServiceExt;

/// One trained miniature run shared by every test in this file.
fn run_dir() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::Builder::new().prefix("avit-http").tempdir().unwrap().keep();
        let mut cfg = RunConfig::miniature();
        cfg.corpus = CorpusConfig { n_records: 240, ..cfg.corpus };
        run_all(&cfg, &dir).unwrap();
        dir
    })
}

fn state() -> Arc<ServiceState> {
    static S: OnceLock<Arc<ServiceState>> = OnceLock::new();
    S.get_or_init(|| ServiceState::ready(Models::load(run_dir()).unwrap())).clone()
}

async fn call(state: Arc<ServiceState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(b) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(b.to_string())
        }
        None => Body::empty(),
    };
    let resp = router(state).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn raw(state: Arc<ServiceState>, uri: &str, body: &str) -> StatusCode {
    let req = Request::post(uri).header(header::CONTENT_TYPE, "application/json").body(Body::from(body.to_string())).unwrap();
    router(state).oneshot(req).await.unwrap().status()
}

fn first_clip() -> String {
    Models::load(run_dir()).unwrap().corpus.split(Split::Test).next().unwrap().id.clone()
}

#[tokio::test]
async fn endpoints_answer_503_until_models_are_installed() {
    let s = ServiceState::loading();
    assert_eq!(call(s.clone(), "GET", "/clips", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(call(s.clone(), "GET", "/mesh/template", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    let (st, _) = call(s.clone(), "POST", "/instruct", Some(json!({"clip_id": "x"}))).await;
    assert_eq!(st, StatusCode::SERVICE_UNAVAILABLE);
    let (st, _) = call(s.clone(), "POST", "/synthesize", Some(json!({"clip_id": "x", "instruction": "hi"}))).await;
    assert_eq!(st, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(s.request_count(), 4);
}

#[tokio::test]
async fn clips_lists_the_test_split() {
    let (st, a) = call(state(), "GET", "/clips", None).await;
    assert_eq!(st, StatusCode::OK);
    let clips = a["clips"].as_array().unwrap();
    // 240 records, a fifth held out for test
    assert_eq!(clips.len(), 48);
    let ids: std::collections::BTreeSet<&str> = clips.iter().map(|c| c["id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), clips.len());
    assert!(clips.iter().all(|c| c["n_frames"].as_u64().unwrap() > 0 && c["emotion"].is_string()));
    assert_eq!(a["checkpoints"].as_object().unwrap().len(), 5);
    let (_, b) = call(state(), "GET", "/clips", None).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn instruct_is_deterministic_and_rejects_unknown_clips() {
    let clip = first_clip();
    let (st, a) = call(state(), "POST", "/instruct", Some(json!({ "clip_id": clip }))).await;
    assert_eq!(st, StatusCode::OK);
    assert!(a["instruction"].as_str().is_some_and(|s| !s.is_empty()));
    assert!(a.get("parsed").is_some());
    let (_, b) = call(state(), "POST", "/instruct", Some(json!({ "clip_id": clip }))).await;
    assert_eq!(a, b);
    let (st, e) = call(state(), "POST", "/instruct", Some(json!({"clip_id": "missing"}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert!(e["checkpoints"].is_object());
    assert_eq!(raw(state(), "/instruct", "{not json").await, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(raw(state(), "/instruct", r#"{"clip": "x"}"#).await, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn synthesize_payload_shapes_and_reproducibility() {
    let clip = first_clip();
    let req = json!({"clip_id": clip, "instruction": "The speaker sounds very happy; lip corners are raised strongly.", "n_samples": 1, "seed": 3});
    let (st, a) = call(state(), "POST", "/synthesize", Some(req.clone())).await;
    assert_eq!(st, StatusCode::OK);
    let (_, b) = call(state(), "POST", "/synthesize", Some(req)).await;
    assert_eq!(a, b);

    let anims = a["animations"].as_array().unwrap();
    assert_eq!(anims.len(), 1);
    assert_eq!(anims[0]["fps"], 25);
    let t = anims[0]["frames"].as_array().unwrap().len();
    assert_eq!(a["lip_trajectory"].as_array().unwrap().len(), t);
    let lf = a["landmark_frames"].as_array().unwrap();
    assert_eq!(lf.len(), t);
    assert!(lf.iter().all(|f| f.as_array().unwrap().len() == 3 && f[0].as_array().unwrap().len() == 3));
    assert!(a["diversity"].is_null());
    assert!(a["vertices"].is_null());
    assert_eq!(anims[0]["provenance"]["checkpoints"], a["checkpoints"]);

    let req = json!({"clip_id": clip, "instruction": "The speaker sounds sad.", "n_samples": 4, "seed": 1});
    let (st, c) = call(state(), "POST", "/synthesize", Some(req)).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(c["animations"].as_array().unwrap().len(), 4);
    assert!(c["diversity"].as_f64().unwrap() > 0.0);
}

#[tokio::test]
async fn synthesize_accepts_unknown_words_and_full_vertices() {
    let clip = first_clip();
    let req = json!({"clip_id": clip, "instruction": "The speaker sounds flabbergasted", "n_samples": 1, "seed": 0});
    let (st, a) = call(state(), "POST", "/synthesize?full=1", Some(req)).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(a["unknown_words"], json!(["flabbergasted"]));
    let v = a["vertices"].as_array().unwrap();
    assert_eq!(v.len(), a["lip_trajectory"].as_array().unwrap().len());
    let n_v = Models::load(run_dir()).unwrap().template.n_v();
    assert_eq!(v[0].as_array().unwrap().len(), n_v);
}

#[tokio::test]
async fn synthesize_validates_requests() {
    let clip = first_clip();
    for n in [0, 17] {
        let (st, _) = call(state(), "POST", "/synthesize", Some(json!({"clip_id": clip, "instruction": "x", "n_samples": n}))).await;
        assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY, "n_samples {n}");
    }
    let (st, _) = call(state(), "POST", "/synthesize", Some(json!({"clip_id": clip, "instruction": "   "}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = call(state(), "POST", "/synthesize", Some(json!({"clip_id": clip}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = call(state(), "POST", "/synthesize", Some(json!({"clip_id": "nope", "instruction": "x"}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn template_mesh_is_stable_and_in_bounds() {
    let (st, a) = call(state(), "GET", "/mesh/template", None).await;
    assert_eq!(st, StatusCode::OK);
    let (_, b) = call(state(), "GET", "/mesh/template", None).await;
    assert_eq!(a, b);
    let m = Models::load(run_dir()).unwrap();
    let n_v = a["vertices"].as_array().unwrap().len();
    assert_eq!(n_v, m.template.n_v());
    assert_eq!(a["faces"].as_array().unwrap().len(), m.template.faces.len());
    for (_, idx) in a["regions"].as_object().unwrap() {
        assert!(idx.as_array().unwrap().iter().all(|i| (i.as_u64().unwrap() as usize) < n_v));
    }
    assert_eq!(a["hash"].as_str().unwrap().len(), 64);
}

#[tokio::test]
async fn cors_allows_localhost_only() {
    let origin = |o: &'static str| {
        Request::get("/clips").header(header::ORIGIN, o).body(Body::empty()).unwrap()
    };
    let r = router(state()).oneshot(origin("http://localhost:5173")).await.unwrap();
    assert_eq!(r.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).unwrap(), "http://localhost:5173");
    let r = router(state()).oneshot(origin("http://evil.example")).await.unwrap();
    assert!(r.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).is_none());
    let r = router(state()).oneshot(origin("http://localhost.evil.example")).await.unwrap();
    assert!(r.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).is_none());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_match_serial_ones() {
    let clip = first_clip();
    let reqs: Vec<Value> = (0..6)
        .map(|s| json!({"clip_id": clip, "instruction": "The speaker sounds angry; brows are furrowed strongly.", "n_samples": 2, "seed": s}))
        .collect();
    let mut serial = Vec::new();
    for r in &reqs {
        serial.push(call(state(), "POST", "/synthesize", Some(r.clone())).await.1);
    }
    let handles: Vec<_> = reqs.iter().cloned().map(|r| tokio::spawn(call(state(), "POST", "/synthesize", Some(r)))).collect();
    for (h, want) in handles.into_iter().zip(serial) {
        assert_eq!(h.await.unwrap().1, want);
    }
}
