//! The prediction microservice run on a packaged bundle.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dpm_core::features::{InputSignature, Preprocessor};
use dpm_core::lightsaber::TrainedModel;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;

pub const MODEL_FILE: &str = "model.dpm";
pub const PREPROCESSOR_FILE: &str = "preprocessor.json";
pub const SERVING_FILE: &str = "serving.json";
pub const DEPENDENCIES_FILE: &str = "dependencies.json";
pub const CONTAINERFILE: &str = "Containerfile";

/// `serving.json`: what the bundle serves and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServingConfig {
    pub model_name: String,
    pub version: u64,
    pub run_id: String,
    pub artifact_sha256: String,
    pub model_kind: String,
    pub model_file: String,
    pub signature: InputSignature,
}

/// Reads a bundle and checks its parts agree with each other.
pub fn load_bundle(dir: &Path) -> Result<(ServingConfig, TrainedModel), String> {
    let read = |name: &str| fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"));
    let config: ServingConfig =
        serde_json::from_slice(&read(SERVING_FILE)?).map_err(|e| format!("{SERVING_FILE}: {e}"))?;
    let bytes = read(&config.model_file)?;
    let sha = dpm_registry::sha256_hex(&bytes);
    if sha != config.artifact_sha256 {
        return Err(format!(
            "{}: sha256 {sha} does not match {}",
            config.model_file, config.artifact_sha256
        ));
    }
    let model = TrainedModel::from_bytes(&bytes).map_err(|e| format!("{}: {e}", config.model_file))?;
    let pre: Preprocessor = serde_json::from_slice(&read(PREPROCESSOR_FILE)?)
        .map_err(|e| format!("{PREPROCESSOR_FILE}: {e}"))?;
    if pre != model.preprocessor || config.signature != model.signature() {
        return Err("bundle metadata disagrees with the model artifact".into());
    }
    Ok((config, model))
}

enum Status {
    Loading,
    Ready(Arc<TrainedModel>),
    Failed(String),
}

pub struct ServerState {
    config: Option<ServingConfig>,
    status: RwLock<Status>,
}

impl ServerState {
    fn model(&self) -> Result<Arc<TrainedModel>, Response> {
        match &*self.status.read().unwrap() {
            Status::Ready(m) => Ok(m.clone()),
            Status::Loading => Err(error(StatusCode::SERVICE_UNAVAILABLE, "Loading", "model is loading".into(), None)),
            Status::Failed(e) => Err(error(StatusCode::SERVICE_UNAVAILABLE, "LoadFailed", e.clone(), None)),
        }
    }
}

fn error(status: StatusCode, code: &str, message: String, schema: Option<Value>) -> Response {
    let mut body = json!({ "code": code, "message": message });
    if let Some(schema) = schema {
        body["schema"] = schema;
    }
    (status, Json(body)).into_response()
}

async fn ping(State(state): State<Arc<ServerState>>) -> Response {
    match (&*state.status.read().unwrap(), &state.config) {
        (Status::Ready(_), Some(c)) => Json(json!({
            "status": "ok",
            "model_name": c.model_name,
            "version": c.version,
            "artifact_sha256": c.artifact_sha256,
        }))
        .into_response(),
        (Status::Failed(e), _) => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "failed", "error": e })),
        )
            .into_response(),
        _ => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading" }))).into_response(),
    }
}

fn row_schema(sig: InputSignature) -> Value {
    let fixed = |items: Value, n: usize| json!({ "type": "array", "items": items, "minItems": n, "maxItems": n });
    json!({
        "type": "object",
        "required": ["static", "temporal", "mask"],
        "properties": {
            "static": fixed(json!({ "type": "number" }), sig.n_static),
            "temporal": fixed(fixed(json!({ "type": "number" }), sig.n_channels), sig.n_bins),
            "mask": fixed(fixed(json!({ "type": "number", "enum": [0, 1] }), sig.n_channels), sig.n_bins),
        }
    })
}

/// OpenAPI 3 description of the server.
pub fn openapi(config: &ServingConfig) -> Value {
    let sig = config.signature;
    json!({
        "openapi": "3.0.3",
        "info": {
            "title": format!("{} v{}", config.model_name, config.version),
            "version": config.version.to_string(),
            "description": format!(
                "{} model; static [{}], temporal and mask [T={}][C={}]. Raw-unit inputs; imputation and normalization are applied by the server.",
                config.model_kind, sig.n_static, sig.n_bins, sig.n_channels
            ),
        },
        "paths": {
            "/ping": { "get": {
                "summary": "Health check",
                "responses": { "200": { "description": "model loaded" }, "503": { "description": "model not loaded" } }
            }},
            "/spec": { "get": {
                "summary": "This document",
                "responses": { "200": { "description": "OpenAPI document" } }
            }},
            "/predict": { "post": {
                "summary": "Outcome probability for one row or a batch",
                "requestBody": { "required": true, "content": { "application/json": { "schema": {
                    "oneOf": [
                        { "$ref": "#/components/schemas/Row" },
                        { "$ref": "#/components/schemas/Batch" }
                    ]
                }}}},
                "responses": {
                    "200": { "description": "probability or probabilities", "content": { "application/json": { "schema": {
                        "oneOf": [
                            { "type": "object", "properties": { "probability": { "type": "number" } } },
                            { "type": "object", "properties": { "probabilities": { "type": "array", "items": { "type": "number" } } } }
                        ]
                    }}}},
                    "400": { "description": "input does not match the schema" },
                    "503": { "description": "model not loaded" }
                }
            }}
        },
        "components": { "schemas": {
            "Row": row_schema(sig),
            "Batch": {
                "type": "object",
                "required": ["rows"],
                "properties": { "rows": { "type": "array", "items": { "$ref": "#/components/schemas/Row" } } }
            }
        }}
    })
}

async fn spec(State(state): State<Arc<ServerState>>) -> Response {
    match &state.config {
        Some(c) => Json(openapi(c)).into_response(),
        None => error(StatusCode::SERVICE_UNAVAILABLE, "LoadFailed", "no serving config".into(), None),
    }
}

#[derive(Deserialize)]
struct Row {
    #[serde(rename = "static")]
    statics: Vec<f64>,
    temporal: Vec<Vec<f64>>,
    mask: Vec<Vec<f64>>,
}

fn flatten(grid: &[Vec<f64>], sig: InputSignature, what: &str) -> Result<Vec<f64>, String> {
    if grid.len() != sig.n_bins || grid.iter().any(|r| r.len() != sig.n_channels) {
        let got = grid.first().map_or(0, Vec::len);
        return Err(format!(
            "{what} must be [T][C] = [{}][{}], got [{}][{}]",
            sig.n_bins,
            sig.n_channels,
            grid.len(),
            got
        ));
    }
    Ok(grid.concat())
}

fn score(model: &TrainedModel, row: &Row) -> Result<f64, String> {
    let sig = model.signature();
    if row.statics.len() != sig.n_static {
        return Err(format!(
            "static must have {} values, got {}; expected (T, C) = ({}, {})",
            sig.n_static,
            row.statics.len(),
            sig.n_bins,
            sig.n_channels
        ));
    }
    let temporal = flatten(&row.temporal, sig, "temporal")?;
    let mask = flatten(&row.mask, sig, "mask")?;
    model
        .predict(&row.statics, &temporal, &mask)
        .map_err(|e| e.to_string())
}

async fn predict(State(state): State<Arc<ServerState>>, body: Bytes) -> Response {
    let model = match state.model() {
        Ok(m) => m,
        Err(r) => return r,
    };
    let schema = || Some(row_schema(model.signature()));
    let bad = |message: String| error(StatusCode::BAD_REQUEST, "ShapeMismatch", message, schema());
    let value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return error(StatusCode::BAD_REQUEST, "InvalidJson", e.to_string(), schema()),
    };
    if let Some(rows) = value.get("rows") {
        let rows: Vec<Row> = match serde_json::from_value(rows.clone()) {
            Ok(r) => r,
            Err(e) => return bad(e.to_string()),
        };
        let mut out = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            match score(&model, row) {
                Ok(p) => out.push(p),
                Err(e) => return bad(format!("row {i}: {e}")),
            }
        }
        Json(json!({ "probabilities": out })).into_response()
    } else {
        let row: Row = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => return bad(e.to_string()),
        };
        match score(&model, &row) {
            Ok(p) => Json(json!({ "probability": p })).into_response(),
            Err(e) => bad(e),
        }
    }
}

pub fn router(state: Arc<ServerState>) -> Router {
    Router::new()
        .route("/ping", get(ping))
        .route("/spec", get(spec))
        .route("/predict", post(predict))
        .with_state(state)
}

/// Serves `bundle` on `listener`. Answers 503 until the model has loaded, and keeps
/// answering 503 if it fails to load.
pub async fn serve_bundle(
    listener: TcpListener,
    bundle: PathBuf,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let config: Option<ServingConfig> = fs::read(bundle.join(SERVING_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());
    let state = Arc::new(ServerState {
        config,
        status: RwLock::new(Status::Loading),
    });
    let loader = state.clone();
    tokio::task::spawn_blocking(move || {
        let status = match load_bundle(&bundle) {
            Ok((_, model)) => Status::Ready(Arc::new(model)),
            Err(e) => {
                tracing::error!(bundle = %bundle.display(), error = %e, "model failed to load");
                Status::Failed(e)
            }
        };
        *loader.status.write().unwrap() = status;
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds `addr` and serves `bundle` until ctrl-c or SIGTERM.
pub async fn run(bundle: PathBuf, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, bundle = %bundle.display(), "model server listening");
    serve_bundle(listener, bundle, dpm_registry::server::shutdown_signal()).await?;
    Ok(())
}
