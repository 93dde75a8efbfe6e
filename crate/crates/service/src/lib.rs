//! Session-based HTTP API: create a story, extend it one sentence at a time, branch it.
//!
//! Every session holds an immutable committed [`StorySession`]; extending swaps in a new
//! one, so reads and branches never observe a half-generated frame.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use storyldm_core::checkpoint::{read_file, write_atomic};
use storyldm_core::error::Error as CoreError;
use storyldm_core::pipeline::{extend_story, SessionSnapshot, StoryModel, StorySession};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(skip)]
    status: u16,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
            status: status.as_u16(),
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, &format!("{what}_not_found"), format!("no {what} `{id}`"))
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "validation", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Empty(_) | CoreError::OutOfRange { .. } | CoreError::Config(_) => Self::validation(e.to_string()),
            CoreError::CheckpointMismatch { .. } => Self::new(StatusCode::CONFLICT, "checkpoint_mismatch", e.to_string()),
            other => Self::internal(other.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::validation(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// One generated frame in transit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ApiFrame {
    pub index: usize,
    pub sentence: String,
    /// Base64 PNG.
    pub image: String,
    /// SHA-256 hex of the PNG bytes.
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SessionMeta {
    pub id: String,
    pub checkpoint: String,
    pub seed: u64,
    pub parent: Option<String>,
    pub branch_at: Option<usize>,
    pub created_at: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LineageStep {
    pub id: String,
    pub branch_at: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SessionView {
    #[serde(flatten)]
    pub meta: SessionMeta,
    /// From this session up to its root.
    pub lineage: Vec<LineageStep>,
    pub frames: Vec<ApiFrame>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateRequest {
    pub checkpoint: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateResponse {
    pub id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtendRequest {
    pub sentence: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchRequest {
    pub at: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchResponse {
    pub id: String,
}

#[derive(Serialize, Deserialize)]
struct StoredSession {
    meta: SessionMeta,
    snapshot: SessionSnapshot,
}

struct Slot {
    meta: SessionMeta,
    committed: RwLock<Arc<StorySession>>,
    /// Held for the whole of one generation.
    generating: tokio::sync::Mutex<()>,
}

impl Slot {
    fn new(meta: SessionMeta, session: StorySession) -> Arc<Self> {
        Arc::new(Self {
            meta,
            committed: RwLock::new(Arc::new(session)),
            generating: tokio::sync::Mutex::new(()),
        })
    }

    fn current(&self) -> Arc<StorySession> {
        self.committed.read().expect("session lock poisoned").clone()
    }
}

struct Inner {
    models: HashMap<String, Arc<StoryModel>>,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
    snapshot_dir: Option<PathBuf>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn encode_frame(index: usize, sentence: &str, png: &[u8]) -> ApiFrame {
    ApiFrame {
        index,
        sentence: sentence.to_string(),
        image: base64::engine::general_purpose::STANDARD.encode(png),
        sha256: storyldm_core::hex(&Sha256::digest(png)),
    }
}

fn frames_of(session: &StorySession) -> Result<Vec<ApiFrame>, ApiError> {
    session
        .frames
        .iter()
        .zip(&session.sentences)
        .enumerate()
        .map(|(i, (img, s))| Ok(encode_frame(i, s, &img.to_png_bytes()?)))
        .collect()
}

impl AppState {
    /// Serve the given models; sessions found under `snapshot_dir` are restored.
    pub fn new(models: Vec<StoryModel>, snapshot_dir: Option<PathBuf>) -> Result<Self, CoreError> {
        let models: HashMap<String, Arc<StoryModel>> =
            models.into_iter().map(|m| (m.checkpoint_id(), Arc::new(m))).collect();
        let mut sessions = HashMap::new();
        if let Some(dir) = &snapshot_dir {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
            for entry in std::fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))? {
                let path = entry.map_err(|e| CoreError::io(dir, e))?.path().join("session.json");
                if !path.is_file() {
                    continue;
                }
                let stored: StoredSession = serde_json::from_slice(&read_file(&path)?)?;
                let Some(model) = models.get(&stored.meta.checkpoint) else {
                    log::warn!("skipping session {}: checkpoint {} not loaded", stored.meta.id, stored.meta.checkpoint);
                    continue;
                };
                let session = StorySession::restore(model, &stored.snapshot)?;
                sessions.insert(stored.meta.id.clone(), Slot::new(stored.meta, session));
            }
            log::info!("restored {} sessions from {}", sessions.len(), dir.display());
        }
        Ok(Self {
            inner: Arc::new(Inner {
                models,
                sessions: RwLock::new(sessions),
                snapshot_dir,
            }),
        })
    }

    pub fn checkpoints(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.inner.models.keys().cloned().collect();
        ids.sort();
        ids
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.inner
            .sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session", id))
    }

    fn model(&self, checkpoint: &str) -> Result<Arc<StoryModel>, ApiError> {
        self.inner
            .models
            .get(checkpoint)
            .cloned()
            .ok_or_else(|| ApiError::not_found("checkpoint", checkpoint))
    }

    fn register(&self, meta: SessionMeta, session: StorySession) -> Result<String, ApiError> {
        let mut map = self.inner.sessions.write().expect("session map poisoned");
        let mut meta = meta;
        while map.contains_key(&meta.id) {
            meta.id = fresh_id();
        }
        let id = meta.id.clone();
        let slot = Slot::new(meta, session);
        self.persist(&slot.meta, &slot.current())?;
        map.insert(id.clone(), slot);
        Ok(id)
    }

    fn persist(&self, meta: &SessionMeta, session: &StorySession) -> Result<(), ApiError> {
        let Some(dir) = &self.inner.snapshot_dir else {
            return Ok(());
        };
        let dir = dir.join(&meta.id);
        for (m, img) in session.frames.iter().enumerate() {
            let path = dir.join(format!("frame_{m}.png"));
            if !path.exists() {
                write_atomic(&path, &img.to_png_bytes()?)?;
            }
        }
        let stored = StoredSession {
            meta: meta.clone(),
            snapshot: session.snapshot(),
        };
        write_atomic(&dir.join("session.json"), &serde_json::to_vec(&stored).map_err(CoreError::from)?)?;
        Ok(())
    }

    fn lineage(&self, meta: &SessionMeta) -> Vec<LineageStep> {
        let map = self.inner.sessions.read().expect("session map poisoned");
        let mut out = vec![LineageStep {
            id: meta.id.clone(),
            branch_at: meta.branch_at,
        }];
        let mut parent = meta.parent.clone();
        while let Some(p) = parent {
            match map.get(&p) {
                Some(slot) => {
                    out.push(LineageStep {
                        id: p,
                        branch_at: slot.meta.branch_at,
                    });
                    parent = slot.meta.parent.clone();
                }
                None => {
                    out.push(LineageStep { id: p, branch_at: None });
                    break;
                }
            }
        }
        out
    }
}

fn fresh_id() -> String {
    format!("{:016x}", rand::random::<u64>())
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "checkpoints": state.checkpoints() }))
}

async fn create_session(
    State(state): State<AppState>,
    body: Result<Json<CreateRequest>, JsonRejection>,
) -> ApiResult<CreateResponse> {
    let Json(req) = body?;
    let model = state.model(&req.checkpoint)?;
    let seed = req.seed.unwrap_or_else(rand::random);
    let meta = SessionMeta {
        id: fresh_id(),
        checkpoint: req.checkpoint,
        seed,
        parent: None,
        branch_at: None,
        created_at: now(),
    };
    let id = state.register(meta, StorySession::new(&model, seed))?;
    Ok(Json(CreateResponse { id, seed }))
}

async fn extend_session(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<ExtendRequest>, JsonRejection>,
) -> ApiResult<ApiFrame> {
    let Json(req) = body?;
    let slot = state.slot(&id)?;
    if req.sentence.trim().is_empty() {
        return Err(ApiError::validation("sentence must not be empty"));
    }
    let Ok(_guard) = slot.generating.try_lock() else {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "busy",
            format!("session `{id}` is already generating a frame"),
        ));
    };
    let model = state.model(&slot.meta.checkpoint)?;
    let current = slot.current();
    let sentence = req.sentence.clone();
    let next = tokio::task::spawn_blocking(move || extend_story(&model, &current, &sentence))
        .await
        .map_err(|e| ApiError::internal(format!("generation task failed: {e}")))??;
    let m = next.len() - 1;
    let frame = encode_frame(m, &next.sentences[m], &next.frames[m].to_png_bytes()?);
    state.persist(&slot.meta, &next)?;
    *slot.committed.write().expect("session lock poisoned") = Arc::new(next);
    Ok(Json(frame))
}

async fn branch_session(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<BranchRequest>, JsonRejection>,
) -> ApiResult<BranchResponse> {
    let Json(req) = body?;
    let slot = state.slot(&id)?;
    let child = slot.current().branch(req.at)?;
    let meta = SessionMeta {
        id: fresh_id(),
        checkpoint: slot.meta.checkpoint.clone(),
        seed: slot.meta.seed,
        parent: Some(id),
        branch_at: Some(req.at),
        created_at: now(),
    };
    let id = state.register(meta, child)?;
    Ok(Json(BranchResponse { id }))
}

async fn get_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<SessionView> {
    let slot = state.slot(&id)?;
    let session = slot.current();
    Ok(Json(SessionView {
        lineage: state.lineage(&slot.meta),
        meta: slot.meta.clone(),
        frames: frames_of(&session)?,
    }))
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "route_not_found", "no such route")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/frames", post(extend_session))
        .route("/sessions/{id}/branch", post(branch_session))
        .fallback(fallback)
        .with_state(state)
}

/// Bind and serve until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

/// Load one checkpoint and build a state around it.
pub fn state_from_checkpoint(path: &Path, snapshot_dir: Option<PathBuf>) -> Result<AppState, CoreError> {
    AppState::new(vec![StoryModel::load(path)?], snapshot_dir)
}
