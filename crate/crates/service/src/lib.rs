//! HTTP front end over [`gala_core::api::Engine`].
//!
//! The router answers `/v1/health` with 503 until an engine is installed.
//! Inference runs on the blocking pool behind a bounded number of worker
//! permits; requests beyond the pending-queue limit are refused with 503.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::body::{Body, Bytes};
use axum::extract::{FromRequest, Multipart, Path, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use gala_core::api::{ApiError, CompositeRequest, Engine, QueryRequest, DEFAULT_K};
use gala_core::placement::PlacementConfig;
use gala_core::BoundingBox;
use thiserror::Error;
use tokio::sync::Semaphore;

pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub index: PathBuf,
    /// Background checkpoint, or a directory holding `background.ckpt`.
    pub weights: PathBuf,
    pub port: u16,
    pub grid_k: usize,
    /// Concurrent inference jobs.
    pub workers: usize,
    /// Requests admitted (running plus waiting) before 503s.
    pub max_pending: usize,
}

impl ServiceConfig {
    pub fn new(index: impl Into<PathBuf>, weights: impl Into<PathBuf>) -> Self {
        Self {
            index: index.into(),
            weights: weights.into(),
            port: DEFAULT_PORT,
            grid_k: PlacementConfig::default().grid_k,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            max_pending: 64,
        }
    }

    /// Reads `GALA_INDEX`, `GALA_WEIGHTS`, `GALA_PORT` and `GALA_GRID_K`.
    pub fn from_env() -> Result<Self, ServiceError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let index = var("GALA_INDEX").ok_or_else(|| ServiceError::Config("GALA_INDEX is not set".into()))?;
        let weights = var("GALA_WEIGHTS").ok_or_else(|| ServiceError::Config("GALA_WEIGHTS is not set".into()))?;
        let mut cfg = Self::new(index, weights);
        if let Some(p) = var("GALA_PORT") {
            cfg.port = p.parse().map_err(|_| ServiceError::Config(format!("GALA_PORT `{p}` is not a port")))?;
        }
        if let Some(k) = var("GALA_GRID_K") {
            cfg.grid_k = k.parse().map_err(|_| ServiceError::Config(format!("GALA_GRID_K `{k}` is not an integer")))?;
        }
        Ok(cfg)
    }

    pub fn placement(&self) -> PlacementConfig {
        PlacementConfig {
            grid_k: self.grid_k,
            ..PlacementConfig::default()
        }
    }
}

/// Shared handler state. Cloning is cheap.
#[derive(Clone)]
pub struct AppState {
    engine: Arc<OnceLock<Arc<Engine>>>,
    workers: Arc<Semaphore>,
    pending: Arc<Semaphore>,
}

impl AppState {
    /// State without an engine; every endpoint answers 503 until
    /// [`AppState::install`] is called.
    pub fn empty(workers: usize, max_pending: usize) -> Self {
        Self {
            engine: Arc::new(OnceLock::new()),
            workers: Arc::new(Semaphore::new(workers.max(1))),
            pending: Arc::new(Semaphore::new(max_pending.max(1))),
        }
    }

    pub fn loaded(engine: Engine) -> Self {
        let state = Self::empty(1, 64);
        state.install(engine);
        state
    }

    /// Installs the engine; returns `false` if one was already installed.
    pub fn install(&self, engine: Engine) -> bool {
        self.engine.set(Arc::new(engine)).is_ok()
    }

    pub fn is_loaded(&self) -> bool {
        self.engine.get().is_some()
    }
}

struct HttpError(ApiError);

impl From<ApiError> for HttpError {
    fn from(e: ApiError) -> Self {
        HttpError(e)
    }
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = serde_json::json!({ "error": self.0.to_string() });
        (status, axum::Json(body)).into_response()
    }
}

fn with_type(bytes: Vec<u8>, content_type: &'static str) -> Response {
    let mut resp = Response::new(Body::from(bytes));
    resp.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type));
    resp
}

/// Runs `job` on the blocking pool once a worker permit is free.
async fn run<T, F>(state: &AppState, job: F) -> Result<T, HttpError>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, ApiError> + Send + 'static,
{
    let engine = state
        .engine
        .get()
        .cloned()
        .ok_or_else(|| ApiError::Unavailable("index not loaded".into()))?;
    let _slot = state
        .pending
        .clone()
        .try_acquire_owned()
        .map_err(|_| ApiError::Unavailable("too many pending requests".into()))?;
    let _permit = state
        .workers
        .clone()
        .acquire_owned()
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    tokio::task::spawn_blocking(move || job(&engine))
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
        .map_err(HttpError)
}

#[derive(Default)]
struct Form {
    image: Option<Vec<u8>>,
    bbox: Option<[u32; 4]>,
    k: Option<usize>,
    object_id: Option<String>,
}

fn bad(msg: impl Into<String>) -> HttpError {
    HttpError(ApiError::BadRequest(msg.into()))
}

/// Accepts `l,t,w,h` or a JSON array.
fn parse_box(text: &str) -> Result<[u32; 4], HttpError> {
    let text = text.trim();
    let b: BoundingBox = if text.starts_with('[') {
        let raw: [u32; 4] = serde_json::from_str(text).map_err(|e| bad(format!("box: {e}")))?;
        BoundingBox::try_from(raw).map_err(|e| bad(e.to_string()))?
    } else {
        text.parse().map_err(|e: gala_core::GalaError| bad(e.to_string()))?
    };
    Ok([b.left, b.top, b.width, b.height])
}

async fn read_form(req: Request) -> Result<Form, HttpError> {
    let mut multipart = Multipart::from_request(req, &())
        .await
        .map_err(|e| bad(format!("multipart: {e}")))?;
    let mut form = Form::default();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| bad(format!("multipart: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| bad(format!("multipart: {e}")))?;
        let text = || String::from_utf8(data.to_vec()).map_err(|_| bad(format!("field `{name}` is not UTF-8")));
        match name.as_str() {
            "image" => form.image = Some(data.to_vec()),
            "box" => {
                let t = text()?;
                if !t.trim().is_empty() {
                    form.bbox = Some(parse_box(&t)?);
                }
            }
            "k" => form.k = Some(text()?.trim().parse().map_err(|_| bad("k must be an integer"))?),
            "object_id" => form.object_id = Some(text()?),
            _ => {}
        }
    }
    Ok(form)
}

fn is_multipart(req: &Request) -> bool {
    req.headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"))
}

async fn read_body(req: Request) -> Result<Bytes, HttpError> {
    axum::body::to_bytes(req.into_body(), usize::MAX)
        .await
        .map_err(|e| bad(format!("body: {e}")))
}

async fn query(State(state): State<AppState>, req: Request) -> Result<Response, HttpError> {
    let body = if is_multipart(&req) {
        let form = read_form(req).await?;
        let image = form.image.ok_or_else(|| bad("missing `image` field"))?;
        let q = QueryRequest {
            image: B64.encode(image),
            bbox: form.bbox,
            k: form.k.unwrap_or(DEFAULT_K),
        };
        run(&state, move |e| {
            let resp = e.query(&q)?;
            serde_json::to_vec(&resp).map_err(|err| ApiError::Internal(err.to_string()))
        })
        .await?
    } else {
        let bytes = read_body(req).await?;
        run(&state, move |e| e.query_json(&bytes)).await?
    };
    Ok(with_type(body, "application/json"))
}

async fn composite(State(state): State<AppState>, req: Request) -> Result<Response, HttpError> {
    let request = if is_multipart(&req) {
        let form = read_form(req).await?;
        CompositeRequest {
            image: B64.encode(form.image.ok_or_else(|| bad("missing `image` field"))?),
            object_id: form.object_id.ok_or_else(|| bad("missing `object_id` field"))?,
            bbox: form.bbox.ok_or_else(|| bad("missing `box` field"))?,
        }
    } else {
        let bytes = read_body(req).await?;
        serde_json::from_slice(&bytes).map_err(|e| bad(format!("malformed composite request: {e}")))?
    };
    let png = run(&state, move |e| e.composite(&request)).await?;
    Ok(with_type(png, "image/png"))
}

async fn thumbnail(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, HttpError> {
    let png = run(&state, move |e| e.thumbnail(&id)).await?;
    Ok(with_type(png, "image/png"))
}

async fn health(State(state): State<AppState>) -> Response {
    match state.engine.get() {
        Some(e) => axum::Json(e.health()).into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            axum::Json(serde_json::json!({ "status": "loading" })),
        )
            .into_response(),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/query", post(query))
        .route("/v1/composite", post(composite))
        .route("/v1/objects/{id}/thumbnail", get(thumbnail))
        .route("/v1/health", get(health))
        .with_state(state)
}

/// Binds the port, loads the engine in the background and serves until the
/// listener fails.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let placement = config.placement();
    placement
        .validate()
        .map_err(|e| ServiceError::Config(e.to_string()))?;
    let state = AppState::empty(config.workers, config.max_pending);
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {addr}");

    let loader = state.clone();
    let (index, weights) = (config.index.clone(), config.weights.clone());
    tokio::task::spawn_blocking(move || match Engine::load(&index, &weights, placement) {
        Ok(engine) => {
            log::info!("loaded {} objects from {}", engine.index().len(), index.display());
            loader.install(engine);
        }
        Err(e) => log::error!("failed to load {}: {e}", index.display()),
    });

    axum::serve(listener, router(state)).await?;
    Ok(())
}
