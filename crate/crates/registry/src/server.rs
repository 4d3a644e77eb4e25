//! REST API over a [`Registry`], all under `/api/v1`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use crate::store::{Registry, RegistryError};
use crate::types::*;

pub const DEFAULT_ADDR: &str = "127.0.0.1:5180";
pub const DEFAULT_EVENT_LIMIT: usize = 100;
pub const MAX_EVENT_LIMIT: usize = 1000;

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

pub struct ApiError(RegistryError);

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        use RegistryError::*;
        let status = match &self.0 {
            UnknownRun(_) | UnknownArtifact(_) | UnknownModel(_) | UnknownVersion { .. } => {
                StatusCode::NOT_FOUND
            }
            RunNotActive(_) | ParamConflict { .. } | MetricStepRegression { .. }
            | RunNotFinished(_) => StatusCode::CONFLICT,
            InvalidStage(_) | InvalidRequest(_) => StatusCode::BAD_REQUEST,
            JournalCorrupt { .. } | Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        let body = ErrorBody {
            code: self.0.code().to_string(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, RegistryError> {
    serde_json::from_slice(body).map_err(|e| RegistryError::InvalidRequest(e.to_string()))
}

async fn blocking<T, F>(reg: Arc<Registry>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Registry) -> Result<T, RegistryError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&reg))
        .await
        .map_err(|e| RegistryError::Io(std::io::Error::other(e.to_string())))?
        .map_err(ApiError)
}

#[derive(Deserialize)]
pub struct CreateRunRequest {
    pub experiment: String,
}

#[derive(Deserialize)]
pub struct FinishRunRequest {
    pub status: String,
}

#[derive(Deserialize)]
pub struct ParamRequest {
    pub key: String,
    pub value: String,
}

#[derive(Deserialize)]
pub struct MetricRequest {
    pub key: String,
    pub step: i64,
    pub value: f64,
}

#[derive(Deserialize)]
pub struct RegisterRequest {
    pub run_id: String,
    #[serde(default = "default_artifact")]
    pub artifact_name: String,
}

fn default_artifact() -> String {
    dpm_core::lightsaber::MODEL_ARTIFACT.to_string()
}

#[derive(Deserialize)]
pub struct StageRequest {
    pub stage: String,
}

#[derive(Deserialize)]
pub struct TagRequest {
    pub key: String,
    pub value: String,
}

#[derive(Deserialize)]
struct RunsQuery {
    experiment: Option<String>,
}

#[derive(Deserialize)]
struct ArtifactQuery {
    name: Option<String>,
}

#[derive(Deserialize)]
struct EventsQuery {
    after: Option<u64>,
    limit: Option<usize>,
}

fn parse_status(s: &str) -> Result<RunStatus, RegistryError> {
    match s.to_ascii_uppercase().as_str() {
        "FINISHED" => Ok(RunStatus::Finished),
        "FAILED" => Ok(RunStatus::Failed),
        "RUNNING" => Ok(RunStatus::Running),
        _ => Err(RegistryError::InvalidRequest(format!("unknown run status {s:?}"))),
    }
}

fn parse_version(v: &str) -> Result<u64, RegistryError> {
    v.parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| RegistryError::InvalidRequest(format!("invalid version {v:?}")))
}

async fn create_run(State(reg): State<Arc<Registry>>, body: Bytes) -> ApiResult<(StatusCode, Json<Run>)> {
    let req: CreateRunRequest = parse(&body)?;
    let run = blocking(reg, move |r| r.create_run(&req.experiment)).await?;
    Ok((StatusCode::CREATED, Json(run)))
}

async fn list_runs(State(reg): State<Arc<Registry>>, Query(q): Query<RunsQuery>) -> ApiResult<Json<Vec<Run>>> {
    let runs = blocking(reg, move |r| Ok(r.list_runs(q.experiment.as_deref()))).await?;
    Ok(Json(runs))
}

async fn get_run(State(reg): State<Arc<Registry>>, Path(id): Path<String>) -> ApiResult<Json<Run>> {
    Ok(Json(blocking(reg, move |r| r.get_run(&id)).await?))
}

async fn finish_run(State(reg): State<Arc<Registry>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Run>> {
    let req: FinishRunRequest = parse(&body)?;
    let status = parse_status(&req.status)?;
    Ok(Json(blocking(reg, move |r| r.finish_run(&id, status)).await?))
}

async fn log_param(State(reg): State<Arc<Registry>>, Path(id): Path<String>, body: Bytes) -> ApiResult<StatusCode> {
    let req: ParamRequest = parse(&body)?;
    blocking(reg, move |r| r.log_param(&id, &req.key, &req.value)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn log_metric(State(reg): State<Arc<Registry>>, Path(id): Path<String>, body: Bytes) -> ApiResult<StatusCode> {
    let req: MetricRequest = parse(&body)?;
    blocking(reg, move |r| r.log_metric(&id, &req.key, req.step, req.value)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn log_artifact(
    State(reg): State<Arc<Registry>>,
    Path(id): Path<String>,
    Query(q): Query<ArtifactQuery>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<ArtifactRef>)> {
    let name = q
        .name
        .ok_or_else(|| RegistryError::InvalidRequest("missing name query parameter".into()))?;
    let artifact = blocking(reg, move |r| r.log_artifact(&id, &name, &body)).await?;
    Ok((StatusCode::CREATED, Json(artifact)))
}

async fn register_model(
    State(reg): State<Arc<Registry>>,
    Path(name): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<ModelVersion>)> {
    let req: RegisterRequest = parse(&body)?;
    let v = blocking(reg, move |r| r.register_model(&req.run_id, &name, &req.artifact_name)).await?;
    Ok((StatusCode::CREATED, Json(v)))
}

async fn get_version(
    State(reg): State<Arc<Registry>>,
    Path((name, v)): Path<(String, String)>,
) -> ApiResult<Json<ModelVersion>> {
    let v = parse_version(&v)?;
    Ok(Json(blocking(reg, move |r| r.get_version(&name, v)).await?))
}

async fn transition_stage(
    State(reg): State<Arc<Registry>>,
    Path((name, v)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Json<ModelVersion>> {
    let v = parse_version(&v)?;
    let req: StageRequest = parse(&body)?;
    let stage: Stage = req.stage.parse().map_err(RegistryError::InvalidStage)?;
    Ok(Json(blocking(reg, move |r| r.transition_stage(&name, v, stage)).await?))
}

async fn set_tag(
    State(reg): State<Arc<Registry>>,
    Path((name, v)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Json<ModelVersion>> {
    let v = parse_version(&v)?;
    let req: TagRequest = parse(&body)?;
    Ok(Json(
        blocking(reg, move |r| r.set_version_tag(&name, v, &req.key, &req.value)).await?,
    ))
}

async fn list_models(State(reg): State<Arc<Registry>>) -> ApiResult<Json<Vec<RegisteredModel>>> {
    Ok(Json(blocking(reg, |r| Ok(r.list_models())).await?))
}

async fn get_model(State(reg): State<Arc<Registry>>, Path(name): Path<String>) -> ApiResult<Json<RegisteredModel>> {
    Ok(Json(blocking(reg, move |r| r.get_model(&name)).await?))
}

async fn poll_events(State(reg): State<Arc<Registry>>, Query(q): Query<EventsQuery>) -> ApiResult<Json<Vec<Event>>> {
    let after = q.after.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_EVENT_LIMIT).min(MAX_EVENT_LIMIT);
    Ok(Json(blocking(reg, move |r| Ok(r.poll_events(after, limit))).await?))
}

async fn get_artifact(State(reg): State<Arc<Registry>>, Path(hash): Path<String>) -> ApiResult<Response> {
    let bytes = blocking(reg, move |r| r.artifact_bytes(&hash)).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn health(State(reg): State<Arc<Registry>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "last_event_id": reg.last_event_id() }))
}

pub fn router(registry: Arc<Registry>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/:id", get(get_run).patch(finish_run))
        .route("/runs/:id/params", post(log_param))
        .route("/runs/:id/metrics", post(log_metric))
        .route("/runs/:id/artifacts", post(log_artifact))
        .route("/models", get(list_models))
        .route("/models/:name", get(get_model))
        .route("/models/:name/versions", post(register_model))
        .route("/models/:name/versions/:v", get(get_version))
        .route("/models/:name/versions/:v/stage", post(transition_stage))
        .route("/models/:name/versions/:v/tags", post(set_tag))
        .route("/events", get(poll_events))
        .route("/artifacts/:hash", get(get_artifact))
        .route("/health", get(health));
    let mut app = Router::new().nest("/api/v1", api);
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    app.layer(DefaultBodyLimit::max(512 << 20))
        .layer(CorsLayer::permissive())
        .with_state(registry)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    registry: Arc<Registry>,
    ui_dir: Option<PathBuf>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(registry, ui_dir))
        .with_graceful_shutdown(shutdown)
        .await
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub addr: SocketAddr,
    pub data_dir: PathBuf,
    pub ui_dir: Option<PathBuf>,
}

impl ServerConfig {
    /// `REGISTRY_ADDR`, `REGISTRY_DATA_DIR` and `REGISTRY_UI_DIR`.
    pub fn from_env() -> Result<Self, String> {
        let addr = std::env::var("REGISTRY_ADDR").unwrap_or_else(|_| DEFAULT_ADDR.to_string());
        let addr = addr
            .parse()
            .map_err(|e| format!("REGISTRY_ADDR {addr:?}: {e}"))?;
        let data_dir = std::env::var_os("REGISTRY_DATA_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("registry-data"));
        let ui_dir = std::env::var_os("REGISTRY_UI_DIR").map(PathBuf::from);
        Ok(Self {
            addr,
            data_dir,
            ui_dir,
        })
    }
}

/// Opens the store and serves until ctrl-c or SIGTERM.
pub async fn run(config: ServerConfig) -> anyhow::Result<()> {
    let registry = Arc::new(
        tokio::task::spawn_blocking({
            let dir = config.data_dir.clone();
            move || Registry::open(dir)
        })
        .await??,
    );
    let listener = TcpListener::bind(config.addr).await?;
    tracing::info!(addr = %listener.local_addr()?, data_dir = %config.data_dir.display(), "registry listening");
    serve(listener, registry, config.ui_dir, shutdown_signal()).await?;
    Ok(())
}

pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
