//! HTTP inference service.
//!
//! | method | path                         |                                   |
//! |--------|------------------------------|-----------------------------------|
//! | POST   | `/sessions`                  | create from a [`CreateSession`]   |
//! | GET    | `/sessions`                  | list session metadata             |
//! | GET    | `/sessions/{id}`             | one session's metadata            |
//! | DELETE | `/sessions/{id}`             | remove a session                  |
//! | POST   | `/sessions/{id}/defocus-map` | preview the target map of a spec  |
//! | POST   | `/sessions/{id}/render`      | render a spec                     |
//! | GET    | `/healthz`                   | liveness and model status         |
//!
//! Model inference runs on blocking threads behind a semaphore sized by
//! [`ServiceConfig::workers`].

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dc2_core::spec::TileConfig;
use dc2_core::Image;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::formats::{encode_png, encode_raw};
use crate::session::{SessionMeta, SessionStore};
use crate::wire::{
    b64_encode, CreateSession, DefocusMapResponse, ErrorBody, Provenance, RenderRequest, RenderResponse, SessionList,
};

pub const ENV_CKPT: &str = "DC2_CKPT";
pub const ENV_STORE: &str = "DC2_STORE";
pub const ENV_PORT: &str = "DC2_PORT";
pub const DEFAULT_PORT: u16 = 8080;
const MAX_BODY_BYTES: usize = 256 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub ckpt: Option<PathBuf>,
    pub store: PathBuf,
    pub port: u16,
    /// Concurrent model inferences.
    pub workers: usize,
    pub tiles: TileConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            ckpt: None,
            store: PathBuf::from("dc2-sessions"),
            port: DEFAULT_PORT,
            workers: 1,
            tiles: TileConfig::default(),
        }
    }
}

struct Inner {
    store: SessionStore,
    model: Option<Arc<Checkpoint>>,
    pool: Semaphore,
    tiles: TileConfig,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(store: SessionStore, model: Option<Checkpoint>, workers: usize, tiles: TileConfig) -> Result<Self> {
        tiles.validate()?;
        Ok(Self(Arc::new(Inner {
            store,
            model: model.map(Arc::new),
            pool: Semaphore::new(workers.max(1)),
            tiles,
        })))
    }

    /// Opens the store and loads the checkpoint named by `cfg`, if any.
    pub fn from_config(cfg: &ServiceConfig) -> Result<Self> {
        let model = cfg.ckpt.as_deref().map(checkpoint::load).transpose()?;
        Self::new(SessionStore::open(&cfg.store)?, model, cfg.workers, cfg.tiles)
    }

    pub fn checkpoint_id(&self) -> Option<&str> {
        self.0.model.as_deref().map(|c| c.id.as_str())
    }
}

/// An [`Error`] rendered as a JSON response with a matching status code.
pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

pub fn status_of(e: &Error) -> StatusCode {
    use dc2_core::Error as Core;
    match e {
        Error::NotFound(_) => StatusCode::NOT_FOUND,
        Error::NoModel => StatusCode::SERVICE_UNAVAILABLE,
        Error::Invalid(_) | Error::Png(_) | Error::Json(_) | Error::Format { .. } => StatusCode::BAD_REQUEST,
        Error::Core(Core::Domain(_) | Core::DimensionMismatch { .. } | Core::InvalidConfig(_) | Core::Empty(_)) => {
            StatusCode::BAD_REQUEST
        }
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (status_of(&self.0), Json(ErrorBody { error: self.0.to_string() })).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| Error::Invalid(format!("request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(Error::Invalid(format!("worker failed: {e}"))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_loaded: bool,
    pub checkpoint_id: Option<String>,
}

async fn healthz(State(st): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_loaded: st.0.model.is_some(),
        checkpoint_id: st.checkpoint_id().map(str::to_string),
    })
}

async fn create_session(State(st): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionMeta>)> {
    let req: CreateSession = parse(&body)?;
    let session = blocking(move || st.0.store.create(req.to_input()?)).await?;
    Ok((StatusCode::CREATED, Json(session.meta)))
}

async fn list_sessions(State(st): State<AppState>) -> ApiResult<Json<SessionList>> {
    let sessions = blocking(move || st.0.store.list()).await?;
    Ok(Json(SessionList { sessions }))
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionMeta>> {
    let s = blocking(move || st.0.store.get(&id)).await?;
    Ok(Json(s.meta))
}

async fn delete_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    blocking(move || st.0.store.delete(&id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

/// Radii mapped to grey levels, `max_radius_px` white.
pub fn preview(radii: &Image, max_radius_px: f32) -> Image {
    let k = if max_radius_px > 0.0 { 1.0 / max_radius_px } else { 0.0 };
    radii.map(|r| (r * k).clamp(0.0, 1.0))
}

async fn defocus_map(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<DefocusMapResponse>> {
    let req: RenderRequest = parse(&body)?;
    let resp = blocking(move || {
        let session = st.0.store.get(&id)?;
        let map = session.target_defocus(&req.spec.to_spec()?, req.max_radius_px)?;
        Ok(DefocusMapResponse {
            preview_png: b64_encode(&encode_png(&preview(&map.radii, req.max_radius_px))?),
            map_raw: b64_encode(&encode_raw(&map.radii)),
            max_radius_px: req.max_radius_px,
        })
    })
    .await?;
    Ok(Json(resp))
}

async fn render(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<RenderResponse>> {
    let req: RenderRequest = parse(&body)?;
    let start = Instant::now();
    let st2 = st.clone();
    let id2 = id.clone();
    let session = blocking(move || st2.0.store.get(&id2)).await?;
    let ckpt = st.0.model.clone().ok_or(Error::NoModel)?;
    let spec = req.spec.to_spec()?;
    let _permit = st
        .0
        .pool
        .acquire()
        .await
        .map_err(|_| Error::Invalid("worker pool closed".into()))?;
    let tiles = st.0.tiles;
    let max_r = req.max_radius_px;
    let ck = ckpt.clone();
    let png = blocking(move || encode_png(&session.render(&ck.model, &spec, max_r, &tiles)?)).await?;
    Ok(Json(RenderResponse {
        image_png: b64_encode(&png),
        provenance: Provenance {
            checkpoint_id: ckpt.id.clone(),
            session_id: id,
            spec: req.spec,
            max_radius_px: req.max_radius_px,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        },
    }))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/defocus-map", post(defocus_map))
        .route("/sessions/{id}/render", post(render))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Binds `0.0.0.0:port` and serves until interrupted.
pub async fn serve(cfg: &ServiceConfig) -> Result<()> {
    let state = AppState::from_config(cfg)?;
    let addr = SocketAddr::from(([0, 0, 0, 0], cfg.port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(crate::error::io_err(format!("bind {addr}")))?;
    eprintln!("listening on {addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(crate::error::io_err("server"))
}
