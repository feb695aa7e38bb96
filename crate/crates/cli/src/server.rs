//! Live inference sessions over HTTP.
//!
//! Each session owns a generated scene and the hand frames rendered from
//! pointer samples. Every posted frame reruns the network on the prefix
//! received so far; the first decision is latched.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ien::dataset::derive_seed;
use ien::decision::{decision_for, Decision};
use ien::model::{forward, IenConfig};
use ien::motion::{render_hand_frame, HandState, MotionConfig, Preshape, RenderMode};
use ien::optim::ParamSet;
use ien::scene::{generate_scene, render_affordance_channels, AffordanceClass, BBox, Scene};
use ien::tensor::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

/// Seconds of pointer time over which aperture and hand size ramp up.
const REACH_SECONDS: f64 = 1.0;

pub struct ServerConfig {
    pub threshold: f64,
    pub idle_timeout: Duration,
    pub static_dir: Option<PathBuf>,
}

struct Session {
    scene: Scene,
    channels: Tensor<f32>,
    frames: Vec<Tensor<f32>>,
    frames_received: usize,
    trace: Vec<Vec<f64>>,
    decision: Option<LatchedDecision>,
    last_heatmap: Option<Vec<f32>>,
    created_at: Instant,
    last_active: Instant,
}

#[derive(Clone, Copy, Debug, Serialize)]
struct LatchedDecision {
    object_id: usize,
    frame: usize,
}

pub struct AppState {
    params: ParamSet<f32>,
    model: IenConfig,
    config: ServerConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: std::sync::atomic::AtomicU64,
    id_salt: u64,
}

impl AppState {
    pub fn new(params: ParamSet<f32>, model: IenConfig, config: ServerConfig) -> Self {
        AppState {
            params,
            model,
            config,
            sessions: Mutex::new(HashMap::new()),
            next_id: std::sync::atomic::AtomicU64::new(1),
            id_salt: rand::random(),
        }
    }

    async fn sweep(&self) {
        let now = Instant::now();
        let timeout = self.config.idle_timeout;
        let mut sessions = self.sessions.lock().await;
        let mut expired = Vec::new();
        for (id, s) in sessions.iter() {
            if let Ok(s) = s.try_lock() {
                if now.duration_since(s.last_active) > timeout {
                    expired.push(id.clone());
                }
            }
        }
        for id in expired {
            sessions.remove(&id);
        }
    }

    async fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sweep().await;
        self.sessions
            .lock()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, code: "bad_request", message: message.into() }
    }

    fn not_found(id: &str) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            code: "not_found",
            message: format!("no active session {id}"),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    let text = if body.is_empty() { &b"{}"[..] } else { &body[..] };
    serde_json::from_slice(text).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

#[derive(Deserialize)]
struct CreateSession {
    seed: Option<u64>,
    n_objects: Option<usize>,
}

#[derive(Deserialize)]
struct FrameSample {
    x: f64,
    y: f64,
    t: f64,
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/session", post(create_session))
        .route("/api/session/{id}", get(get_session).delete(delete_session))
        .route("/api/session/{id}/frame", post(post_frame))
        .fallback(api_fallback);
    let app = match &state.config.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(index)),
    };
    app.with_state(state)
}

async fn api_fallback() -> ApiError {
    ApiError { status: StatusCode::NOT_FOUND, code: "not_found", message: "no such route".into() }
}

async fn index() -> impl IntoResponse {
    axum::response::Html(
        "<!doctype html><title>ien</title><p>Intention estimation server. \
         The API lives under <code>/api/session</code>.</p>",
    )
}

fn bbox_json(b: &BBox) -> Value {
    json!([b.x, b.y, b.w, b.h])
}

fn scene_summary(id: &str, scene: &Scene) -> Result<Value, ApiError> {
    let scene_json: Value =
        serde_json::from_str(&scene.to_json().map_err(ApiError::internal)?).map_err(ApiError::internal)?;
    Ok(json!({
        "id": id,
        "scene": scene_json,
        "grid": [scene.grid.height, scene.grid.width],
        "bboxes": scene.objects.iter().map(|o| bbox_json(&o.bbox)).collect::<Vec<_>>(),
    }))
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let n = req.n_objects.unwrap_or(2);
    if !(2..=3).contains(&n) {
        return Err(ApiError::bad_request(format!("n_objects must be 2 or 3, got {n}")));
    }
    let seed = req.seed.unwrap_or_else(rand::random);
    let scene = generate_scene(n, state.model.grid, seed).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let channels = render_affordance_channels(&scene);
    let serial = state.next_id.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let id = format!("{:016x}", derive_seed(state.id_salt, serial));
    let body = scene_summary(&id, &scene)?;
    let now = Instant::now();
    let session = Session {
        scene,
        channels,
        frames: Vec::new(),
        frames_received: 0,
        trace: Vec::new(),
        decision: None,
        last_heatmap: None,
        created_at: now,
        last_active: now,
    };
    state.sweep().await;
    state.sessions.lock().await.insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

/// Handle grasp if the pointer is closest to some cup's handle region.
fn preshape_near(scene: &Scene, x: f64, y: f64) -> Preshape {
    let mut best = (f64::INFINITY, Preshape::WrapPre);
    for o in &scene.objects {
        let masks = o.masks();
        for (class, pre) in [
            (AffordanceClass::Contain, Preshape::WrapPre),
            (AffordanceClass::WrapGrasp, Preshape::WrapPre),
            (AffordanceClass::HandleGrasp, Preshape::HandlePre),
        ] {
            for (px, py) in masks.pixels(class) {
                let d = (px as f64 - x).powi(2) + (py as f64 - y).powi(2);
                if d < best.0 {
                    best = (d, pre);
                }
            }
        }
    }
    best.1
}

/// Hand state for a pointer sample: aperture and size follow elapsed time.
pub fn pointer_hand_state(scene: &Scene, x: f64, y: f64, t: f64) -> HandState {
    let cfg = MotionConfig::for_grid(scene.grid);
    let progress = (t / REACH_SECONDS).clamp(0.0, 1.0);
    let r0 = 0.5 * (cfg.start_radius.0 + cfg.start_radius.1);
    let r1 = 0.5 * (cfg.end_radius.0 + cfg.end_radius.1);
    HandState {
        position: (x, y),
        aperture: 0.3 + 0.6 * (std::f64::consts::PI * progress).sin(),
        preshape: preshape_near(scene, x, y),
        scale: r0 + (r1 - r0) * progress,
    }
}

fn render_mode(model: &IenConfig) -> RenderMode {
    if model.hand_channels == 1 {
        RenderMode::DepthLike
    } else {
        RenderMode::RgbHandExtracted
    }
}

fn frame_body(s: &Session) -> Value {
    json!({
        "frame": s.frames_received,
        "probabilities": s.trace.last().cloned().unwrap_or_else(|| {
            vec![1.0 / s.scene.objects.len() as f64; s.scene.objects.len()]
        }),
        "decision": s.decision,
        "heatmap": s.last_heatmap,
    })
}

async fn post_frame(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let sample: FrameSample = parse_body(&body)?;
    if !(sample.x.is_finite() && sample.y.is_finite() && sample.t.is_finite()) {
        return Err(ApiError::bad_request("x, y and t must be finite"));
    }
    let session = state.session(&id).await?;
    let mut s = session.lock().await;
    s.last_active = Instant::now();
    s.frames_received += 1;
    if s.frames.len() >= state.model.max_sequence {
        return Ok(Json(frame_body(&s)));
    }
    let hand = pointer_hand_state(&s.scene, sample.x, sample.y, sample.t);
    let frame_seed = derive_seed(s.scene.seed, s.frames.len() as u64);
    let frame = render_hand_frame(&hand, render_mode(&state.model), s.scene.grid, frame_seed);
    s.frames.push(frame);
    let seq = Tensor::stack(&s.frames).map_err(ApiError::internal)?;
    let heatmap = forward(&state.params, &state.model, &s.channels, &seq).map_err(ApiError::internal)?;
    let n = s.frames.len();
    let decision: Decision =
        decision_for(&heatmap, &s.scene.bboxes(), n, state.config.threshold).map_err(ApiError::internal)?;
    s.trace.push(decision.probabilities.iter().map(|p| p.probability).collect());
    if s.decision.is_none() {
        if let Some(object_id) = decision.chosen {
            s.decision = Some(LatchedDecision { object_id, frame: n });
        }
    }
    s.last_heatmap = Some(heatmap.into_data());
    Ok(Json(frame_body(&s)))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<Value>, ApiError> {
    let session = state.session(&id).await?;
    let mut s = session.lock().await;
    s.last_active = Instant::now();
    let mut body = scene_summary(&id, &s.scene)?;
    body["frames_received"] = json!(s.frames_received);
    body["trace"] = json!(s.trace);
    body["decision"] = json!(s.decision);
    body["threshold"] = json!(state.config.threshold);
    body["age_s"] = json!(s.created_at.elapsed().as_secs_f64());
    Ok(Json(body))
}

async fn delete_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    state.sweep().await;
    match state.sessions.lock().await.remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(&id)),
    }
}
