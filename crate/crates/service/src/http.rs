//! HTTP query service. Routes:
//!
//! - `POST /query`: JSON (base64 images) or multipart/form-data
//! - `GET /item/{id}/screenshot`
//! - `GET /healthz`
//! - `GET /index/info`
//! - `POST /index/reload` (needs `SWIRE_ADMIN_TOKEN`)
//!
//! Wire formats are described in `docs/api.md`.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{FromRequest, Multipart, Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use swire_core::imaging::{decode_gray, GrayImage};
use swire_core::pipeline::{run_query, PipelineError, QueryInput};

use crate::snapshot::{Snapshot, SnapshotError, Sources};

pub const MAX_K: usize = 100;
pub const DEFAULT_K: usize = 10;
pub const TOKEN_ENV: &str = "SWIRE_ADMIN_TOKEN";

pub struct AppState {
    snapshot: RwLock<Arc<Snapshot>>,
    reloading: AtomicBool,
    sources: Option<Sources>,
    admin_token: Option<String>,
}

impl AppState {
    pub fn new(snapshot: Snapshot, sources: Option<Sources>, admin_token: Option<String>) -> Self {
        Self {
            snapshot: RwLock::new(Arc::new(snapshot)),
            reloading: AtomicBool::new(false),
            sources,
            admin_token: admin_token.filter(|t| !t.is_empty()),
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock poisoned").clone()
    }

    pub fn is_reloading(&self) -> bool {
        self.reloading.load(Ordering::SeqCst)
    }

    /// Load a fresh snapshot from the configured paths and swap it in.
    /// Queries already running keep the snapshot they started with.
    pub fn reload(&self) -> Result<String, ReloadError> {
        let src = self.sources.as_ref().ok_or(ReloadError::NoSources)?;
        if self.reloading.swap(true, Ordering::SeqCst) {
            return Err(ReloadError::Busy);
        }
        let fresh = Snapshot::load(src);
        let out = fresh.map(|s| {
            let fp = s.fingerprint.clone();
            *self.snapshot.write().expect("snapshot lock poisoned") = Arc::new(s);
            fp
        });
        self.reloading.store(false, Ordering::SeqCst);
        Ok(out?)
    }

    /// Mark the service as reloading without loading anything; for tests
    /// and for operators draining traffic.
    pub fn set_reloading(&self, on: bool) {
        self.reloading.store(on, Ordering::SeqCst);
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReloadError {
    #[error("service was started without reloadable paths")]
    NoSources,
    #[error("a reload is already running")]
    Busy,
    #[error(transparent)]
    Load(#[from] SnapshotError),
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/query", post(query))
        .route("/item/{id}/screenshot", get(screenshot))
        .route("/healthz", get(healthz))
        .route("/index/info", get(info))
        .route("/index/reload", post(reload))
        .with_state(state)
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, field: Option<&str>, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), field: field.map(str::to_string) }
    }

    fn bad(field: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, Some(field), message)
    }

    fn mismatch(field: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, Some(field), message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut r = (self.status, Json(ErrorBody { error: self.message, field: self.field })).into_response();
        if self.status == StatusCode::SERVICE_UNAVAILABLE {
            r.headers_mut().insert(header::RETRY_AFTER, "1".parse().expect("static header"));
        }
        r
    }
}

/// JSON form of a query. Images are base64 PNG.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonQuery {
    mode: Option<String>,
    k: Option<i64>,
    image: Option<String>,
    segments: Option<Vec<bool>>,
    flow: Option<Vec<String>>,
}

/// A query after transport decoding, before mode checks.
#[derive(Debug, Default)]
struct RawQuery {
    mode: Option<String>,
    k: Option<i64>,
    image: Option<Vec<u8>>,
    segments: Option<Vec<bool>>,
    flow: Option<Vec<Vec<u8>>>,
}

fn b64(field: &str, s: &str) -> Result<Vec<u8>, ApiError> {
    base64::engine::general_purpose::STANDARD
        .decode(s.trim())
        .map_err(|e| ApiError::bad(field, format!("{field}: invalid base64 ({e})")))
}

fn png(field: &str, bytes: &[u8]) -> Result<GrayImage, ApiError> {
    decode_gray(bytes).map_err(|e| ApiError::bad(field, format!("{field}: not a decodable image ({e})")))
}

fn from_json(body: &[u8]) -> Result<RawQuery, ApiError> {
    let q: JsonQuery = serde_json::from_slice(body).map_err(|e| ApiError::bad("body", format!("malformed JSON body: {e}")))?;
    let flow = match &q.flow {
        Some(frames) => Some(
            frames.iter().enumerate().map(|(i, f)| b64(&format!("flow[{i}]"), f)).collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    Ok(RawQuery {
        mode: q.mode,
        k: q.k,
        image: q.image.as_deref().map(|s| b64("image", s)).transpose()?,
        segments: q.segments,
        flow,
    })
}

/// `segments` in a form field: a JSON array of booleans or a string of 0/1.
fn parse_mask(text: &str) -> Result<Vec<bool>, ApiError> {
    let t = text.trim();
    if t.starts_with('[') {
        return serde_json::from_str(t).map_err(|e| ApiError::bad("segments", format!("segments: {e}")));
    }
    t.chars()
        .filter(|c| !matches!(c, ',' | ' '))
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(ApiError::bad("segments", format!("segments: unexpected character {c:?}"))),
        })
        .collect()
}

async fn from_multipart(mut mp: Multipart) -> Result<RawQuery, ApiError> {
    let mut q = RawQuery::default();
    let malformed = |e: axum::extract::multipart::MultipartError| ApiError::bad("body", format!("malformed multipart body: {e}"));
    while let Some(field) = mp.next_field().await.map_err(malformed)? {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(malformed)?;
        let text = || String::from_utf8(data.to_vec()).map_err(|_| ApiError::bad(&name, format!("{name}: not UTF-8")));
        match name.as_str() {
            "mode" => q.mode = Some(text()?),
            "k" => q.k = Some(text()?.trim().parse().map_err(|_| ApiError::bad("k", "k: not an integer"))?),
            "image" => q.image = Some(data.to_vec()),
            "segments" => q.segments = Some(parse_mask(&text()?)?),
            "flow" => q.flow.get_or_insert_with(Vec::new).push(data.to_vec()),
            other => return Err(ApiError::bad(other, format!("unknown field {other:?}"))),
        }
    }
    Ok(q)
}

/// Enforce exactly the fields each mode needs, then decode images.
fn to_input(q: RawQuery) -> Result<(QueryInput, usize), ApiError> {
    let k = match q.k {
        None => DEFAULT_K,
        Some(k) if (1..=MAX_K as i64).contains(&k) => k as usize,
        Some(k) => return Err(ApiError::mismatch("k", format!("k must be in [1, {MAX_K}], got {k}"))),
    };
    let mode = q.mode.as_deref().ok_or_else(|| ApiError::mismatch("mode", "mode is required"))?;
    let forbid = |present: bool, field: &str| {
        if present {
            Err(ApiError::mismatch(field, format!("{field} is not allowed in {mode} mode")))
        } else {
            Ok(())
        }
    };
    let need = |field: &str| ApiError::mismatch(field, format!("{mode} mode requires {field}"));
    let input = match mode {
        "full" => {
            forbid(q.segments.is_some(), "segments")?;
            forbid(q.flow.is_some(), "flow")?;
            QueryInput::Full(png("image", &q.image.ok_or_else(|| need("image"))?)?)
        }
        "segments" => {
            forbid(q.flow.is_some(), "flow")?;
            let mask = q.segments.ok_or_else(|| need("segments"))?;
            QueryInput::Segments { image: png("image", &q.image.ok_or_else(|| need("image"))?)?, mask }
        }
        "flow" => {
            forbid(q.image.is_some(), "image")?;
            forbid(q.segments.is_some(), "segments")?;
            let frames = q.flow.ok_or_else(|| need("flow"))?;
            let imgs = frames.iter().enumerate().map(|(i, f)| png(&format!("flow[{i}]"), f)).collect::<Result<_, _>>()?;
            QueryInput::Flow(imgs)
        }
        other => return Err(ApiError::mismatch("mode", format!("unknown mode {other:?}; use full, segments or flow"))),
    };
    Ok((input, k))
}

/// Which request field a pipeline failure is about.
fn pipeline_error(input: &QueryInput, e: PipelineError) -> ApiError {
    use swire_core::index::IndexError;
    let field = match (&e, input) {
        (PipelineError::MaskSize { .. }, _) | (PipelineError::Index(IndexError::NoParts), _) => "segments",
        (PipelineError::Index(IndexError::NoActiveCells | IndexError::CellOutOfRange { .. }), _) => "segments",
        (PipelineError::Index(IndexError::FlowTooShort(_) | IndexError::NoWindow(_)), _) => "flow",
        (_, QueryInput::Flow(_)) => "flow",
        _ => "image",
    };
    ApiError::mismatch(field, e.to_string())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ResultItem {
    pub id: String,
    pub distance: f64,
    pub thumbnail: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub mode: String,
    pub k: usize,
    pub results: Vec<ResultItem>,
    pub latency_ms: f64,
    pub index_fingerprint: String,
}

fn thumbnail(snap: &Snapshot, id: &str) -> String {
    let item = match snap.index.get(id) {
        Some(_) => id.to_string(),
        None => snap.index.window_members(id).and_then(|m| m.first().map(|s| s.to_string())).unwrap_or_default(),
    };
    format!("/item/{item}/screenshot")
}

fn is_multipart(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.to_ascii_lowercase().starts_with("multipart/form-data"))
}

async fn query(State(state): State<Arc<AppState>>, req: Request) -> Result<Json<QueryResponse>, ApiError> {
    let start = Instant::now();
    if state.is_reloading() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, None, "index is reloading; retry shortly"));
    }
    let raw = if is_multipart(req.headers()) {
        let mp = Multipart::from_request(req, &()).await.map_err(|e| ApiError::bad("body", e.body_text()))?;
        from_multipart(mp).await?
    } else {
        let body = Bytes::from_request(req, &()).await.map_err(|e| ApiError::bad("body", e.body_text()))?;
        from_json(&body)?
    };
    let snap = state.snapshot();
    let (input, k) = to_input(raw)?;
    let mode = input.mode_name().to_string();
    let worker = snap.clone();
    let ranked = tokio::task::spawn_blocking(move || {
        let r = run_query(&worker.encoder, &worker.index, &input, k);
        r.map_err(|e| pipeline_error(&input, e))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()))??;
    let results = ranked
        .0
        .into_iter()
        .map(|r| ResultItem { thumbnail: thumbnail(&snap, &r.id), id: r.id, distance: r.distance })
        .collect();
    Ok(Json(QueryResponse {
        mode,
        k,
        results,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        index_fingerprint: snap.fingerprint.clone(),
    }))
}

async fn screenshot(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let snap = state.snapshot();
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, Some("id"), format!("unknown item {id:?}"));
    if snap.index.get(&id).is_none() {
        return Err(not_found());
    }
    let path = snap.screenshots.get(&id).ok_or_else(not_found)?;
    let bytes = tokio::fs::read(path).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub build: String,
    pub index_fingerprint: String,
    pub weights_fingerprint: String,
    pub reloading: bool,
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Health> {
    let snap = state.snapshot();
    Json(Health {
        status: "ok".into(),
        build: env!("CARGO_PKG_VERSION").into(),
        index_fingerprint: snap.fingerprint.clone(),
        weights_fingerprint: snap.weights_fingerprint.clone(),
        reloading: state.is_reloading(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IndexInfo {
    pub items: usize,
    pub grid: Option<(usize, usize)>,
    pub traces: usize,
    pub max_flow_len: usize,
    pub input_size: usize,
    pub profile: String,
    pub fingerprint: String,
}

async fn info(State(state): State<Arc<AppState>>) -> Json<IndexInfo> {
    let snap = state.snapshot();
    Json(IndexInfo {
        items: snap.index.len(),
        grid: snap.index.grid(),
        traces: snap.index.traces().len(),
        max_flow_len: snap.index.max_flow_len(),
        input_size: snap.encoder.config().input_size,
        profile: snap.encoder.config().profile.clone(),
        fingerprint: snap.fingerprint.clone(),
    })
}

fn presented_token(headers: &HeaderMap) -> Option<&str> {
    if let Some(v) = headers.get("x-admin-token").and_then(|v| v.to_str().ok()) {
        return Some(v);
    }
    headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "))
}

async fn reload(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Result<Json<serde_json::Value>, ApiError> {
    let Some(want) = state.admin_token.as_deref() else {
        return Err(ApiError::new(StatusCode::FORBIDDEN, None, format!("reload disabled: {TOKEN_ENV} is not set")));
    };
    if presented_token(&headers) != Some(want) {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, Some("token"), "missing or wrong admin token"));
    }
    let worker = state.clone();
    let fp = tokio::task::spawn_blocking(move || worker.reload())
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()))?;
    match fp {
        Ok(fp) => Ok(Json(serde_json::json!({ "index_fingerprint": fp }))),
        Err(ReloadError::Busy) => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, None, "a reload is already running")),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string())),
    }
}

/// Reload on every SIGHUP until the process exits.
#[cfg(unix)]
pub fn spawn_sighup_reloader(state: Arc<AppState>) -> std::io::Result<()> {
    use tokio::signal::unix::{signal, SignalKind};
    let mut hup = signal(SignalKind::hangup())?;
    tokio::spawn(async move {
        while hup.recv().await.is_some() {
            let worker = state.clone();
            match tokio::task::spawn_blocking(move || worker.reload()).await {
                Ok(Ok(fp)) => eprintln!("reloaded index {fp}"),
                Ok(Err(e)) => eprintln!("reload failed: {e}"),
                Err(e) => eprintln!("reload task failed: {e}"),
            }
        }
    });
    Ok(())
}

/// Bind and serve until the process is stopped.
pub async fn serve(state: Arc<AppState>, port: u16) -> std::io::Result<()> {
    #[cfg(unix)]
    spawn_sighup_reloader(state.clone())?;
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
