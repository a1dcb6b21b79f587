//! JSON-over-HTTP API for the browser viewer.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use scene4d_core::editor::EditError;
use scene4d_core::formats::encode_png;
use scene4d_core::parser::PlanBackend;

use crate::error::{EngineError, ErrorBody};
use crate::pipeline::{CameraSpec, EngineConfig};
use crate::session::Session;

pub type SharedBackend = Arc<dyn PlanBackend + Send + Sync>;
type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

pub struct AppState {
    data_dir: PathBuf,
    config: EngineConfig,
    backend: Option<SharedBackend>,
    sessions: Mutex<HashMap<String, SessionHandle>>,
}

impl AppState {
    pub fn new(data_dir: impl Into<PathBuf>, config: EngineConfig, backend: Option<SharedBackend>) -> Self {
        Self {
            data_dir: data_dir.into(),
            config,
            backend,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    /// Cached handle, loading the session from disk on first use.
    fn session(&self, id: &str) -> Result<SessionHandle, ApiError> {
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(EngineError::SessionNotFound(id.to_string()).into());
        }
        let mut map = self.sessions.lock().expect("session map lock");
        if let Some(s) = map.get(id) {
            return Ok(s.clone());
        }
        let session = Session::open(self.data_dir.join(id)).map_err(|e| match e {
            EngineError::SessionNotFound(_) => EngineError::SessionNotFound(id.to_string()),
            other => other,
        })?;
        let handle = Arc::new(tokio::sync::Mutex::new(session));
        map.insert(id.to_string(), handle.clone());
        Ok(handle)
    }
}

pub struct ApiError(EngineError);

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        ApiError(e)
    }
}

pub fn status_for(e: &EngineError) -> StatusCode {
    match e {
        EngineError::BadRequest(_) => StatusCode::BAD_REQUEST,
        EngineError::SessionNotFound(_) | EngineError::NoRoute(_) => StatusCode::NOT_FOUND,
        EngineError::NothingToUndo => StatusCode::CONFLICT,
        EngineError::Parse(_) | EngineError::Trajectory(_) => StatusCode::UNPROCESSABLE_ENTITY,
        EngineError::Edit(EditError::EmptySelection { .. } | EditError::UnknownColor(_) | EditError::MissingColor) => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_for(&self.0);
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (status, Json::<ErrorBody>(self.0.body())).into_response()
    }
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, EngineError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| EngineError::Corrupt(format!("worker failed: {e}")))?
        .map_err(ApiError)
}

fn json_body<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| EngineError::BadRequest(format!("invalid JSON body: {e}")).into())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    seed: Option<u64>,
    frames: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: String,
    pub version: usize,
    pub frame_count: usize,
    pub scene_hash: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommandBody {
    text: String,
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({"status": "ok"}))
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = if body.iter().all(u8::is_ascii_whitespace) {
        CreateSession::default()
    } else {
        json_body(&body)?
    };
    let mut config = state.config.clone();
    if let Some(seed) = req.seed {
        config.seed = seed;
    }
    if let Some(frames) = req.frames {
        config.frames = frames;
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let dir = state.data_dir.join(&id);
    let sid = id.clone();
    let session = blocking(move || Session::create(dir, sid, config)).await?;
    let created = SessionCreated {
        id: id.clone(),
        version: session.current_version(),
        frame_count: session.current().scene.frame_count(),
        scene_hash: session.scene_hash().to_string(),
    };
    state
        .sessions
        .lock()
        .expect("session map lock")
        .insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn command(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: CommandBody = json_body(&body)?;
    let handle = state.session(&id)?;
    let guard = handle.lock_owned().await;
    let backend = state.backend.clone();
    let result = blocking(move || {
        let mut session = guard;
        let b = backend.as_deref().map(|b| b as &dyn PlanBackend);
        session.run_command(&req.text, b)
    })
    .await?;
    Ok(Json(result).into_response())
}

async fn frame(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> Result<Response, ApiError> {
    let t = match query.get("t") {
        Some(v) => v
            .parse::<usize>()
            .map_err(|_| EngineError::BadRequest(format!("t={v:?} is not a frame index")))?,
        None => 0,
    };
    let cam: CameraSpec = query.get("cam").map(String::as_str).unwrap_or("fixed").parse()?;
    let handle = state.session(&id)?;
    let guard = handle.lock_owned().await;
    let png = blocking(move || Ok(encode_png(&guard.render(t, cam)?)?)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn history(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let handle = state.session(&id)?;
    let session = handle.lock().await;
    Ok(Json(session.history()).into_response())
}

async fn undo(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let handle = state.session(&id)?;
    let guard = handle.lock_owned().await;
    let result = blocking(move || {
        let mut session = guard;
        session.undo()
    })
    .await?;
    Ok(Json(result).into_response())
}

async fn not_found(uri: axum::http::Uri) -> ApiError {
    EngineError::NoRoute(uri.path().to_string()).into()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/command", post(command))
        .route("/sessions/{id}/frame", get(frame))
        .route("/sessions/{id}/history", get(history))
        .route("/sessions/{id}/undo", post(undo))
        .fallback(not_found)
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
