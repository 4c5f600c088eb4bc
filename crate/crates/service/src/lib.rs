//! HTTP surface over a trained run directory.
//!
//! Models are loaded once and never mutated; handlers run the CPU-bound work on the
//! blocking pool so concurrent requests cannot observe each other.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use avit_core::corpus::{parse_instruction, Split};
use avit_core::metrics::diversity;
use avit_core::pipeline::{self, landmarks, synthesize, template_geometry, Models, TemplateGeometry};
use avit_core::Error as CoreError;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

pub const DEFAULT_PORT: u16 = 8787;
pub const MAX_SAMPLES: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("service is still loading")]
    NotReady,
    #[error("unknown clip {0}")]
    UnknownClip(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotReady => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::UnknownClip(_) => StatusCode::NOT_FOUND,
            ServiceError::BadRequest(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Numeric(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<CoreError> for ServiceError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Numeric(m) => ServiceError::Numeric(m),
            CoreError::Param(m) | CoreError::Tokenize(m) => ServiceError::BadRequest(m),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

/// Shared state. `models` is filled once loading finishes; until then every endpoint
/// answers 503.
#[derive(Default)]
pub struct ServiceState {
    models: OnceLock<Arc<Models>>,
    geometry: OnceLock<Arc<TemplateGeometry>>,
    requests: AtomicU64,
}

impl ServiceState {
    pub fn loading() -> Arc<Self> {
        Arc::new(ServiceState::default())
    }

    pub fn ready(models: Models) -> Arc<Self> {
        let s = Self::loading();
        s.install(models);
        s
    }

    /// First call wins; later calls are ignored so served models never change.
    pub fn install(&self, models: Models) {
        let geo = template_geometry(&models.template);
        if self.models.set(Arc::new(models)).is_ok() {
            let _ = self.geometry.set(Arc::new(geo));
        }
    }

    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn models(&self) -> Result<Arc<Models>, ServiceError> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        self.models.get().cloned().ok_or(ServiceError::NotReady)
    }

    fn hashes(&self) -> Value {
        self.models.get().map_or(Value::Null, |m| json!(m.hashes))
    }
}

struct ApiError(ServiceError, Value);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0.status(), Json(json!({ "error": self.0.to_string(), "checkpoints": self.1 }))).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn fail(state: &ServiceState, e: impl Into<ServiceError>) -> ApiError {
    ApiError(e.into(), state.hashes())
}

/// Adds the checkpoint hashes to a JSON object body.
fn with_hashes(m: &Models, mut body: Value) -> Json<Value> {
    body["checkpoints"] = json!(m.hashes);
    Json(body)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Internal(e.to_string()))?
}

#[derive(Serialize)]
struct ClipInfo<'a> {
    id: &'a str,
    emotion: &'a str,
    intensity: u8,
    n_frames: usize,
}

async fn clips(State(s): State<Arc<ServiceState>>) -> ApiResult {
    let m = s.models().map_err(|e| fail(&s, e))?;
    let list: Vec<ClipInfo> = m
        .corpus
        .split(Split::Test)
        .map(|r| ClipInfo { id: &r.id, emotion: r.state.emotion.name(), intensity: r.state.intensity, n_frames: r.n_frames() })
        .collect();
    Ok(with_hashes(&m, json!({ "clips": list })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstructReq {
    clip_id: String,
}

fn body<T>(b: Result<Json<T>, JsonRejection>) -> Result<T, ServiceError> {
    b.map(|Json(v)| v).map_err(|e| ServiceError::BadRequest(e.body_text()))
}

async fn instruct(State(s): State<Arc<ServiceState>>, req: Result<Json<InstructReq>, JsonRejection>) -> ApiResult {
    let m = s.models().map_err(|e| fail(&s, e))?;
    let req = body(req).map_err(|e| fail(&s, e))?;
    let mm = m.clone();
    let g = blocking(move || {
        let clip = mm.corpus.get(&req.clip_id).ok_or_else(|| ServiceError::UnknownClip(req.clip_id.clone()))?;
        Ok(mm.instruct(clip)?)
    })
    .await
    .map_err(|e| fail(&s, e))?;
    Ok(with_hashes(
        &m,
        json!({ "instruction": g.text, "parsed": parse_instruction(&g.text), "truncated": g.truncated }),
    ))
}

fn default_samples() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthReq {
    clip_id: String,
    instruction: String,
    #[serde(default = "default_samples")]
    n_samples: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize, Default)]
struct SynthQuery {
    #[serde(default)]
    full: Option<u8>,
}

async fn synth(
    State(s): State<Arc<ServiceState>>,
    Query(q): Query<SynthQuery>,
    req: Result<Json<SynthReq>, JsonRejection>,
) -> ApiResult {
    let m = s.models().map_err(|e| fail(&s, e))?;
    let req = body(req).map_err(|e| fail(&s, e))?;
    if !(1..=MAX_SAMPLES).contains(&req.n_samples) {
        return Err(fail(&s, ServiceError::BadRequest(format!("n_samples must be in 1..={MAX_SAMPLES}"))));
    }
    if req.instruction.trim().is_empty() {
        return Err(fail(&s, ServiceError::BadRequest("instruction is empty".into())));
    }
    let full = q.full.unwrap_or(0) != 0;
    let mm = m.clone();
    let out = blocking(move || {
        if mm.corpus.get(&req.clip_id).is_none() {
            return Err(ServiceError::UnknownClip(req.clip_id));
        }
        let out = synthesize(&mm, &req.clip_id, Some(&req.instruction), req.n_samples, req.seed)?;
        let lm = landmarks(&mm.template, &out.animations[0])?;
        let div = if out.styles.len() >= 2 { Some(diversity(&out.styles)?) } else { None };
        let vertices = if full {
            let frames: Vec<Vec<[f64; 3]>> = out.animations[0]
                .frames
                .iter()
                .map(|f| {
                    let mesh = pipeline::frame_mesh(&mm.template, f)?;
                    Ok((0..mesh.vertices.rows()).map(|v| [0, 1, 2].map(|a| mesh.vertices.get(v, a))).collect())
                })
                .collect::<avit_core::Result<_>>()?;
            Some(frames)
        } else {
            None
        };
        Ok(json!({
            "instruction": out.instruction,
            "parsed": out.parsed,
            "unknown_words": out.unknown_words,
            "animations": out.animations,
            "lip_trajectory": lm.lip_trajectory,
            "landmark_regions": pipeline::LANDMARK_REGIONS.map(|r| r.name()),
            "landmark_frames": lm.frames,
            "diversity": div,
            "vertices": vertices,
        }))
    })
    .await
    .map_err(|e| fail(&s, e))?;
    Ok(with_hashes(&m, out))
}

async fn mesh_template(State(s): State<Arc<ServiceState>>) -> ApiResult {
    let m = s.models().map_err(|e| fail(&s, e))?;
    let geo = s.geometry.get().cloned().ok_or_else(|| fail(&s, ServiceError::NotReady))?;
    Ok(with_hashes(&m, json!(geo.as_ref())))
}

fn is_local(origin: &HeaderValue) -> bool {
    let o = origin.to_str().unwrap_or("");
    ["http://localhost", "http://127.0.0.1", "https://localhost", "https://127.0.0.1"]
        .iter()
        .any(|p| o == *p || o.strip_prefix(p).is_some_and(|rest| rest.starts_with(':')))
}

pub fn router(state: Arc<ServiceState>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::predicate(|o, _| is_local(o)))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/clips", get(clips))
        .route("/instruct", post(instruct))
        .route("/synthesize", post(synth))
        .route("/mesh/template", get(mesh_template))
        .layer(cors)
        .with_state(state)
}

/// Binds `port` on localhost, loads the run directory in the background and serves
/// until interrupted.
pub async fn serve(dir: PathBuf, port: u16) -> std::io::Result<()> {
    let state = ServiceState::loading();
    let loader = state.clone();
    let load_dir = dir.clone();
    let load = tokio::task::spawn_blocking(move || Models::load(&load_dir).map(|m| loader.install(m)));
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{addr} (loading {})", dir.display());
    tokio::spawn(async move {
        match load.await {
            Ok(Ok(())) => eprintln!("models ready"),
            Ok(Err(e)) => eprintln!("failed to load models: {e}"),
            Err(e) => eprintln!("loader crashed: {e}"),
        }
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Hash map of the served checkpoints, if loaded.
pub fn served_hashes(state: &ServiceState) -> Option<BTreeMap<String, String>> {
    state.models.get().map(|m| m.hashes.clone())
}
