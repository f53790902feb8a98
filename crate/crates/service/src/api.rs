//! JSON-over-HTTP sessions around [`FastSession`]. Each session runs one
//! generation at a time; a second action while one is in flight gets 409.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use slowfast_core::fast::{FastConfig, FastSession};
use slowfast_core::gridworld::{render_poses, Action, ChunkSpec, World, WorldConfig};
use slowfast_core::metrics::{centered_cosine, scene_cut_count, FeatureExtractor, PooledPixels};
use slowfast_core::model::Model;
use slowfast_core::video::{encode_png, LatentVideo};
use tokio::sync::Mutex as AsyncMutex;

use crate::config::{RunConfig, SrcFeature};
use crate::error::CliResult;

pub struct Session {
    pub id: String,
    pub main: FastSession,
    pub baseline: Option<FastSession>,
    pub loss_traces: Vec<Vec<f32>>,
}

pub struct AppState {
    config: RunConfig,
    spec: ChunkSpec,
    world: WorldConfig,
    scuts_threshold: f64,
    default_model: Option<Arc<Model>>,
    models: Mutex<HashMap<String, Arc<Model>>>,
    sessions: Mutex<HashMap<String, Arc<AsyncMutex<Session>>>>,
    next_id: AtomicU64,
}

impl AppState {
    /// `default_model` serves sessions created without a checkpoint.
    pub fn new(config: RunConfig, default_model: Option<Model>) -> CliResult<Self> {
        config.validate()?;
        Ok(Self {
            spec: config.chunk_spec()?,
            world: config.world_config(),
            scuts_threshold: config.scuts_threshold()?,
            default_model: default_model.map(|m| Arc::new(m.frozen())),
            models: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            config,
        })
    }

    /// Makes `model` available under `name` as a session checkpoint.
    pub fn register_model(&self, name: &str, model: Model) {
        self.models.lock().unwrap().insert(name.to_string(), Arc::new(model.frozen()));
    }

    pub fn session(&self, id: &str) -> Option<Arc<AsyncMutex<Session>>> {
        self.sessions.lock().unwrap().get(id).cloned()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    pub fn scuts_threshold(&self) -> f64 {
        self.scuts_threshold
    }

    fn model(&self, checkpoint: Option<&str>) -> Result<Arc<Model>, ApiError> {
        let Some(name) = checkpoint else {
            return self
                .default_model
                .clone()
                .ok_or_else(|| ApiError::bad_request("no default model loaded; pass a checkpoint"));
        };
        if let Some(m) = self.models.lock().unwrap().get(name) {
            return Ok(m.clone());
        }
        let model = Model::load(std::path::Path::new(name))
            .map_err(|e| ApiError::bad_request(format!("cannot load checkpoint `{name}`: {e}")))?;
        let model = Arc::new(model.frozen());
        self.models.lock().unwrap().insert(name.to_string(), model.clone());
        Ok(model)
    }

    fn extractor(&self, model: &Arc<Model>) -> Box<dyn FeatureExtractor + Send> {
        match self.config.metrics.src_feature {
            SrcFeature::PooledPixels => Box::new(PooledPixels {
                pool: self.config.metrics.pool,
            }),
            SrcFeature::Bottleneck => {
                let m = model.clone();
                Box::new(move |f: &[f32], _h: usize, _w: usize| {
                    m.net
                        .bottleneck_features(&m.params, f)
                        .expect("frame size was checked at session creation")
                        .into_iter()
                        .map(f64::from)
                        .collect::<Vec<f64>>()
                })
            }
        }
    }
}

pub type SharedState = Arc<AppState>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    allowed: Option<Vec<&'static str>>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            allowed: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session `{id}`"))
    }

    fn busy(id: &str) -> Self {
        Self::new(StatusCode::CONFLICT, format!("session `{id}` is already generating"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(a) = self.allowed {
            body["allowed"] = json!(a);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemploraRequest {
    pub enabled: Option<bool>,
    pub rank: Option<usize>,
    pub lr: Option<f64>,
    pub steps_per_chunk: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateSession {
    pub checkpoint: Option<String>,
    pub world_seed: u64,
    pub templora: TemploraRequest,
    pub compare_baseline: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub frame_size: usize,
    pub f_p: usize,
    pub f_g: usize,
    pub templora_enabled: bool,
    pub first_frame: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionRequest {
    pub action_name: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ActionResponse {
    pub chunk_index: usize,
    pub frames: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_frames: Option<Vec<String>>,
    pub elapsed_ms: u64,
    pub templora_loss_trace: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TimelineChunk {
    pub index: usize,
    pub action: String,
    pub frames: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_frames: Option<Vec<String>>,
    /// Scene cuts in the video up to and including this chunk.
    pub scuts_so_far: usize,
    pub templora_loss_trace: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Timeline {
    pub session_id: String,
    pub first_frame: String,
    pub scuts_threshold: f64,
    pub chunks: Vec<TimelineChunk>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkRevisit {
    pub first_visit_chunk: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RevisitScore {
    pub first_visit_chunk: usize,
    pub current_chunk: usize,
    pub src: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_src: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResetResponse {
    pub session_id: String,
    pub chunk_index: usize,
    pub templora_enabled: bool,
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/actions", get(actions))
        .route("/api/session", post(create))
        .route("/api/session/{id}", axum::routing::delete(delete))
        .route("/api/session/{id}/action", post(action))
        .route("/api/session/{id}/timeline", get(timeline))
        .route("/api/session/{id}/mark_revisit", post(mark_revisit))
        .route("/api/session/{id}/templora/reset", post(reset))
        .with_state(state)
}

async fn health(State(s): State<SharedState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "sessions": s.session_count() }))
}

async fn actions() -> Json<Vec<&'static str>> {
    Json(Action::env_names())
}

fn png_b64(frame: &[f32], size: usize) -> Result<String, ApiError> {
    let png = encode_png(frame, size, size).map_err(ApiError::internal)?;
    Ok(base64::engine::general_purpose::STANDARD.encode(png))
}

fn encode_chunk(v: &LatentVideo) -> Result<Vec<String>, ApiError> {
    v.frames().map(|f| png_b64(f, v.height())).collect()
}

async fn create(State(s): State<SharedState>, body: Result<Json<CreateSession>, JsonRejection>) -> ApiResult<Created> {
    let Json(req) = body?;
    let model = s.model(req.checkpoint.as_deref())?;
    if model.frame_size() != s.world.frame_size() {
        return Err(ApiError::bad_request(format!(
            "checkpoint frames are {}px but the world renders {}px",
            model.frame_size(),
            s.world.frame_size()
        )));
    }
    let base = s.config.fast_config();
    let t = &req.templora;
    let fast = FastConfig {
        enabled: t.enabled.unwrap_or(base.enabled),
        rank: t.rank.unwrap_or(base.rank),
        lr: t.lr.unwrap_or(base.lr),
        steps_per_chunk: t.steps_per_chunk.unwrap_or(base.steps_per_chunk),
        ..base
    };
    if fast.rank == 0 || !(fast.lr.is_finite() && fast.lr >= 0.0) {
        return Err(ApiError::bad_request("templora rank must be positive and lr non-negative"));
    }
    let world = World::generate(req.world_seed, &s.world).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let start = world.random_start(req.world_seed).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let first = render_poses(&world, &[start]);
    let main = FastSession::new(model.clone(), first.clone(), s.spec, fast.clone())
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let baseline = if req.compare_baseline {
        let off = FastConfig {
            enabled: false,
            ..fast.clone()
        };
        Some(FastSession::new(model.clone(), first.clone(), s.spec, off).map_err(ApiError::internal)?)
    } else {
        None
    };
    let id = format!("s{}", s.next_id.fetch_add(1, Ordering::Relaxed));
    let session = Session {
        id: id.clone(),
        main,
        baseline,
        loss_traces: Vec::new(),
    };
    s.sessions
        .lock()
        .unwrap()
        .insert(id.clone(), Arc::new(AsyncMutex::new(session)));
    log::info!("session {id} created (world seed {}, templora {})", req.world_seed, fast.enabled);
    Ok(Json(Created {
        session_id: id,
        frame_size: first.height(),
        f_p: s.spec.f_p,
        f_g: s.spec.f_g,
        templora_enabled: fast.enabled,
        first_frame: png_b64(first.frame(0), first.height())?,
    }))
}

fn parse_action(name: &str) -> Result<Action, ApiError> {
    match name.parse::<Action>() {
        Ok(a) if a.is_env_action() => Ok(a),
        _ => Err(ApiError {
            allowed: Some(Action::env_names()),
            ..ApiError::bad_request(format!("invalid action `{name}`"))
        }),
    }
}

async fn action(
    State(s): State<SharedState>,
    Path(id): Path<String>,
    body: Result<Json<ActionRequest>, JsonRejection>,
) -> ApiResult<ActionResponse> {
    let session = s.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let Json(req) = body?;
    let action = parse_action(&req.action_name)?;
    let mut guard = session.try_lock_owned().map_err(|_| ApiError::busy(&id))?;
    let out = tokio::task::spawn_blocking(move || -> Result<ActionResponse, ApiError> {
        let t0 = Instant::now();
        let sess = &mut *guard;
        let chunk = sess.main.generate_step(action).map_err(ApiError::internal)?;
        let trace = sess.main.update_templora().map_err(ApiError::internal)?;
        let baseline = match sess.baseline.as_mut() {
            Some(b) => Some(encode_chunk(&b.generate_step(action).map_err(ApiError::internal)?)?),
            None => None,
        };
        sess.loss_traces.push(trace.clone());
        Ok(ActionResponse {
            chunk_index: sess.main.chunk_index() - 1,
            frames: encode_chunk(&chunk)?,
            baseline_frames: baseline,
            elapsed_ms: t0.elapsed().as_millis() as u64,
            templora_loss_trace: trace,
        })
    })
    .await
    .map_err(ApiError::internal)??;
    Ok(Json(out))
}

async fn timeline(State(s): State<SharedState>, Path(id): Path<String>) -> ApiResult<Timeline> {
    let session = s.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let sess = session.lock().await;
    let video = sess.main.video();
    let f_g = s.spec.f_g;
    let chunks = sess
        .main
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let prefix = video.slice(0, 1 + (i + 1) * f_g);
            let baseline_frames = match sess.baseline.as_ref() {
                Some(b) => Some(encode_chunk(&b.records()[i].output)?),
                None => None,
            };
            Ok(TimelineChunk {
                index: r.index,
                action: r.action.name().to_string(),
                frames: encode_chunk(&r.output)?,
                baseline_frames,
                scuts_so_far: scene_cut_count(&prefix, s.scuts_threshold),
                templora_loss_trace: sess.loss_traces.get(i).cloned().unwrap_or_default(),
            })
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    Ok(Json(Timeline {
        session_id: sess.id.clone(),
        first_frame: png_b64(video.frame(0), video.height())?,
        scuts_threshold: s.scuts_threshold,
        chunks,
    }))
}

/// Mean centred cosine between matching frames of two chunks, times 100.
fn chunk_src(a: &LatentVideo, b: &LatentVideo, extractor: &dyn FeatureExtractor) -> f64 {
    let (h, w) = (a.height(), a.width());
    let n = a.len().min(b.len());
    let total: f64 = (0..n)
        .map(|j| centered_cosine(&extractor.features(a.frame(j), h, w), &extractor.features(b.frame(j), h, w)))
        .sum();
    100.0 * total / n as f64
}

fn session_src(sess: &FastSession, first: usize, extractor: &dyn FeatureExtractor) -> f64 {
    let r = sess.records();
    chunk_src(&r[first].output, &r[r.len() - 1].output, extractor)
}

async fn mark_revisit(
    State(s): State<SharedState>,
    Path(id): Path<String>,
    body: Result<Json<MarkRevisit>, JsonRejection>,
) -> ApiResult<RevisitScore> {
    let session = s.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let Json(req) = body?;
    let sess = session.lock().await;
    let n = sess.main.records().len();
    if n == 0 {
        return Err(ApiError::bad_request("no chunk has been generated yet"));
    }
    if req.first_visit_chunk >= n {
        return Err(ApiError::bad_request(format!(
            "first_visit_chunk {} is past the current chunk {}",
            req.first_visit_chunk,
            n - 1
        )));
    }
    let extractor = s.extractor(sess.main.model());
    Ok(Json(RevisitScore {
        first_visit_chunk: req.first_visit_chunk,
        current_chunk: n - 1,
        src: session_src(&sess.main, req.first_visit_chunk, extractor.as_ref()),
        baseline_src: sess
            .baseline
            .as_ref()
            .map(|b| session_src(b, req.first_visit_chunk, extractor.as_ref())),
    }))
}

async fn reset(State(s): State<SharedState>, Path(id): Path<String>) -> ApiResult<ResetResponse> {
    let session = s.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let mut sess = session.try_lock().map_err(|_| ApiError::busy(&id))?;
    sess.main.reset_templora().map_err(ApiError::internal)?;
    Ok(Json(ResetResponse {
        session_id: sess.id.clone(),
        chunk_index: sess.main.chunk_index(),
        templora_enabled: sess.main.templora().is_some(),
    }))
}

async fn delete(State(s): State<SharedState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    match s.sessions.lock().unwrap().remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(&id)),
    }
}

pub async fn serve(state: SharedState, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
