//! Blocking HTTP client for the registry API.

use std::time::Duration;

use dpm_core::lightsaber::{Tracker, TrackerError};
use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::de::DeserializeOwned;
use serde_json::json;
use thiserror::Error;

use crate::server::ErrorBody;
use crate::types::*;

const SEGMENT: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_').remove(b'.').remove(b'~');

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("registry unreachable: {0}")]
    Unreachable(String),
    #[error("registry returned {status} {code}: {message}")]
    Api {
        status: u16,
        code: String,
        message: String,
    },
    #[error("unexpected registry response: {0}")]
    Decode(String),
}

impl ClientError {
    /// Transport failures and server-side errors; worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            ClientError::Unreachable(_) => true,
            ClientError::Api { status, .. } => *status >= 500,
            ClientError::Decode(_) => false,
        }
    }

    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { code, .. } => Some(code),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone)]
pub struct RegistryClient {
    base: String,
    agent: ureq::Agent,
}

fn seg(s: &str) -> String {
    utf8_percent_encode(s, SEGMENT).to_string()
}

impl RegistryClient {
    /// `base` is the server root, e.g. `http://127.0.0.1:5180`.
    pub fn new(base: &str) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(5))
            .timeout(Duration::from_secs(120))
            .build();
        Self {
            base: format!("{}/api/v1", base.trim_end_matches('/')),
            agent,
        }
    }

    pub fn base_url(&self) -> &str {
        self.base.trim_end_matches("/api/v1")
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn finish(result: std::result::Result<ureq::Response, ureq::Error>) -> Result<ureq::Response> {
        match result {
            Ok(r) => Ok(r),
            Err(ureq::Error::Status(status, r)) => {
                let text = r.into_string().unwrap_or_default();
                let (code, message) = match serde_json::from_str::<ErrorBody>(&text) {
                    Ok(b) => (b.code, b.message),
                    Err(_) => ("Http".to_string(), text),
                };
                Err(ClientError::Api {
                    status,
                    code,
                    message,
                })
            }
            Err(e) => Err(ClientError::Unreachable(e.to_string())),
        }
    }

    fn json<T: DeserializeOwned>(r: ureq::Response) -> Result<T> {
        r.into_json().map_err(|e| ClientError::Decode(e.to_string()))
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        Self::json(Self::finish(self.agent.get(&self.url(path)).call())?)
    }

    fn send(&self, method: &str, path: &str, body: serde_json::Value) -> Result<ureq::Response> {
        Self::finish(self.agent.request(method, &self.url(path)).send_json(body))
    }

    pub fn health(&self) -> Result<serde_json::Value> {
        self.get("/health")
    }

    pub fn last_event_id(&self) -> Result<u64> {
        let h = self.health()?;
        h["last_event_id"]
            .as_u64()
            .ok_or_else(|| ClientError::Decode(format!("health without last_event_id: {h}")))
    }

    pub fn create_run(&self, experiment: &str) -> Result<Run> {
        Self::json(self.send("POST", "/runs", json!({ "experiment": experiment }))?)
    }

    pub fn log_param(&self, run_id: &str, key: &str, value: &str) -> Result<()> {
        let path = format!("/runs/{}/params", seg(run_id));
        self.send("POST", &path, json!({ "key": key, "value": value }))
            .map(drop)
    }

    pub fn log_metric(&self, run_id: &str, key: &str, step: i64, value: f64) -> Result<()> {
        let path = format!("/runs/{}/metrics", seg(run_id));
        self.send("POST", &path, json!({ "key": key, "step": step, "value": value }))
            .map(drop)
    }

    pub fn log_artifact(&self, run_id: &str, name: &str, bytes: &[u8]) -> Result<ArtifactRef> {
        let req = self
            .agent
            .post(&self.url(&format!("/runs/{}/artifacts", seg(run_id))))
            .query("name", name)
            .set("Content-Type", "application/octet-stream");
        Self::json(Self::finish(req.send_bytes(bytes))?)
    }

    pub fn finish_run(&self, run_id: &str, status: RunStatus) -> Result<Run> {
        let path = format!("/runs/{}", seg(run_id));
        Self::json(self.send("PATCH", &path, json!({ "status": status }))?)
    }

    pub fn get_run(&self, run_id: &str) -> Result<Run> {
        self.get(&format!("/runs/{}", seg(run_id)))
    }

    pub fn list_runs(&self, experiment: Option<&str>) -> Result<Vec<Run>> {
        let mut req = self.agent.get(&self.url("/runs"));
        if let Some(e) = experiment {
            req = req.query("experiment", e);
        }
        Self::json(Self::finish(req.call())?)
    }

    pub fn register_model(&self, run_id: &str, model_name: &str, artifact_name: &str) -> Result<ModelVersion> {
        let path = format!("/models/{}/versions", seg(model_name));
        Self::json(self.send(
            "POST",
            &path,
            json!({ "run_id": run_id, "artifact_name": artifact_name }),
        )?)
    }

    pub fn transition_stage(&self, model_name: &str, version: u64, stage: Stage) -> Result<ModelVersion> {
        let path = format!("/models/{}/versions/{version}/stage", seg(model_name));
        Self::json(self.send("POST", &path, json!({ "stage": stage }))?)
    }

    pub fn set_version_tag(&self, model_name: &str, version: u64, key: &str, value: &str) -> Result<ModelVersion> {
        let path = format!("/models/{}/versions/{version}/tags", seg(model_name));
        Self::json(self.send("POST", &path, json!({ "key": key, "value": value }))?)
    }

    pub fn get_version(&self, model_name: &str, version: u64) -> Result<ModelVersion> {
        self.get(&format!("/models/{}/versions/{version}", seg(model_name)))
    }

    pub fn get_model(&self, model_name: &str) -> Result<RegisteredModel> {
        self.get(&format!("/models/{}", seg(model_name)))
    }

    pub fn list_models(&self) -> Result<Vec<RegisteredModel>> {
        self.get("/models")
    }

    pub fn poll_events(&self, after: u64, limit: usize) -> Result<Vec<Event>> {
        let req = self
            .agent
            .get(&self.url("/events"))
            .query("after", &after.to_string())
            .query("limit", &limit.to_string());
        Self::json(Self::finish(req.call())?)
    }

    /// Raw stored bytes; the caller verifies the hash.
    pub fn fetch_artifact(&self, sha256: &str) -> Result<Vec<u8>> {
        let r = Self::finish(self.agent.get(&self.url(&format!("/artifacts/{}", seg(sha256)))).call())?;
        let mut bytes = Vec::new();
        std::io::Read::read_to_end(&mut r.into_reader(), &mut bytes)
            .map_err(|e| ClientError::Unreachable(e.to_string()))?;
        Ok(bytes)
    }
}

fn tracker_error(e: ClientError) -> TrackerError {
    TrackerError(e.to_string())
}

impl Tracker for RegistryClient {
    fn create_run(&mut self, experiment: &str) -> std::result::Result<String, TrackerError> {
        RegistryClient::create_run(self, experiment)
            .map(|r| r.run_id)
            .map_err(tracker_error)
    }

    fn log_param(&mut self, run_id: &str, key: &str, value: &str) -> std::result::Result<(), TrackerError> {
        RegistryClient::log_param(self, run_id, key, value).map_err(tracker_error)
    }

    fn log_metric(&mut self, run_id: &str, key: &str, step: i64, value: f64) -> std::result::Result<(), TrackerError> {
        RegistryClient::log_metric(self, run_id, key, step, value).map_err(tracker_error)
    }

    fn log_artifact(&mut self, run_id: &str, name: &str, bytes: &[u8]) -> std::result::Result<(), TrackerError> {
        RegistryClient::log_artifact(self, run_id, name, bytes)
            .map(drop)
            .map_err(tracker_error)
    }

    fn finish_run(&mut self, run_id: &str, status: RunStatus) -> std::result::Result<(), TrackerError> {
        RegistryClient::finish_run(self, run_id, status)
            .map(drop)
            .map_err(tracker_error)
    }
}
