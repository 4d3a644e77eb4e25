//! `promote`, `status` and `predict`.

use std::path::Path;
use std::time::{Duration, Instant};

use dpm_builder::daemon::{ENDPOINT_TAG, ERROR_TAG, STATUS_TAG};
use dpm_builder::{BuildJob, JobStore};
use dpm_registry::{ClientError, EventKind, ModelVersion, RegistryClient, Stage};
use serde::Serialize;
use serde_json::Value;

use crate::config::StackConfig;
use crate::stack::{self, StackState};

#[derive(Debug, thiserror::Error)]
pub enum OpError {
    #[error("{code}: {message}")]
    Registry { code: String, message: String },
    #[error("RegistryUnreachable: {0}")]
    Unreachable(String),
    #[error("NoDeployment: model {0} has no READY deployment")]
    NoDeployment(String),
    #[error("DeploymentFailed: {name} v{version}: {error}")]
    DeploymentFailed { name: String, version: u64, error: String },
    #[error("Timeout: {0}")]
    Timeout(String),
    #[error("InvalidInput: {0}")]
    InvalidInput(String),
    #[error("PredictFailed: {0}")]
    Predict(String),
}

impl From<ClientError> for OpError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Unreachable(m) => OpError::Unreachable(m),
            ClientError::Api { code, message, .. } => OpError::Registry { code, message },
            ClientError::Decode(m) => OpError::Registry {
                code: "BadResponse".into(),
                message: m,
            },
        }
    }
}

/// Moves a version to Production. With `wait`, blocks until the builder reports a terminal
/// deployment status for this promotion.
pub fn promote(
    client: &RegistryClient,
    name: &str,
    version: u64,
    wait: Option<Duration>,
) -> Result<ModelVersion, OpError> {
    let current = client.get_version(name, version)?;
    let mut after = client.last_event_id()?;
    let promoted = client.transition_stage(name, version, Stage::Production)?;
    let Some(wait) = wait else { return Ok(promoted) };
    if current.stage == Stage::Production {
        // Nothing was promoted, so no new deployment will be reported.
        return settled(name, version, current);
    }
    let deadline = Instant::now() + wait;
    loop {
        for event in client.poll_events(after, 1000)? {
            after = event.event_id;
            let p = &event.payload;
            let reported = event.kind == EventKind::VersionTagged
                && p["model_name"] == name
                && p["version"] == version
                && p["key"] == STATUS_TAG
                && matches!(p["value"].as_str(), Some("READY" | "FAILED"));
            if reported {
                return settled(name, version, client.get_version(name, version)?);
            }
        }
        if Instant::now() >= deadline {
            return Err(OpError::Timeout(format!("{name} v{version} not deployed after {wait:?}")));
        }
        std::thread::sleep(Duration::from_millis(250));
    }
}

fn settled(name: &str, version: u64, v: ModelVersion) -> Result<ModelVersion, OpError> {
    match v.tags.get(STATUS_TAG).map(String::as_str) {
        Some("FAILED") => Err(OpError::DeploymentFailed {
            name: name.into(),
            version,
            error: v.tags.get(ERROR_TAG).cloned().unwrap_or_default(),
        }),
        _ => Ok(v),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VersionStatus {
    pub version: u64,
    pub stage: Stage,
    pub run_id: String,
    pub deployment_status: Option<String>,
    pub endpoint: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelStatus {
    pub name: String,
    pub versions: Vec<VersionStatus>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatusReport {
    pub running: bool,
    pub stack: Option<StackState>,
    pub registry_url: String,
    pub registry_reachable: bool,
    pub models: Vec<ModelStatus>,
    pub jobs: Vec<BuildJob>,
}

pub fn status(config: &StackConfig, client: &RegistryClient) -> anyhow::Result<StatusReport> {
    let stack = stack::running(config)?;
    let (reachable, models) = match client.list_models() {
        Ok(models) => (true, models),
        Err(e) if e.is_transient() => (false, Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let models = models
        .into_iter()
        .map(|m| ModelStatus {
            name: m.name,
            versions: m
                .versions
                .into_iter()
                .map(|v| VersionStatus {
                    deployment_status: v.tags.get(STATUS_TAG).cloned(),
                    endpoint: v.tags.get(ENDPOINT_TAG).cloned(),
                    error: v.tags.get(ERROR_TAG).cloned(),
                    version: v.version,
                    stage: v.stage,
                    run_id: v.run_id,
                })
                .collect(),
        })
        .collect();
    Ok(StatusReport {
        running: stack.is_some(),
        stack,
        registry_url: config.registry_url(),
        registry_reachable: reachable,
        models,
        jobs: JobStore::snapshot(&config.builder_state_dir)?,
    })
}

pub fn render_status(report: &StatusReport) -> String {
    let mut out = String::new();
    match &report.stack {
        Some(s) => out.push_str(&format!(
            "stack: running (supervisor {}, registry {}, builder {})\n",
            s.supervisor_pid,
            s.registry_pid.map_or("-".into(), |p| p.to_string()),
            s.builder_pid.map_or("-".into(), |p| p.to_string()),
        )),
        None => out.push_str("stack: not running\n"),
    }
    let reach = if report.registry_reachable { "" } else { " (unreachable)" };
    out.push_str(&format!("registry: {}{reach}\n", report.registry_url));
    out.push_str("\nmodels:\n");
    if report.models.is_empty() {
        out.push_str("  (none)\n");
    }
    for m in &report.models {
        for v in &m.versions {
            out.push_str(&format!(
                "  {:<24} v{:<4} {:<11} {:<10} {}\n",
                m.name,
                v.version,
                v.stage.to_string(),
                v.deployment_status.as_deref().unwrap_or("-"),
                v.endpoint.as_deref().or(v.error.as_deref()).unwrap_or("")
            ));
        }
    }
    out.push_str("\nbuild jobs:\n");
    if report.jobs.is_empty() {
        out.push_str("  (none)\n");
    }
    for j in &report.jobs {
        out.push_str(&format!(
            "  {:<32} {:<10} attempts {} {}\n",
            j.job_id,
            j.state.as_str(),
            j.attempts,
            j.endpoint.as_deref().or(j.last_error.as_deref()).unwrap_or("")
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    pub model_name: String,
    pub version: u64,
    pub endpoint: String,
    pub response: Value,
}

/// The Production version of `name` and its endpoint, when the builder reported it READY.
pub fn deployment(client: &RegistryClient, name: &str) -> Result<(ModelVersion, String), OpError> {
    let model = client.get_model(name)?;
    model
        .versions
        .into_iter()
        .filter(|v| v.stage == Stage::Production)
        .find_map(|v| {
            let ready = v.tags.get(STATUS_TAG).is_some_and(|s| s == "READY");
            let endpoint = v.tags.get(ENDPOINT_TAG).cloned().filter(|_| ready)?;
            Some((v, endpoint))
        })
        .ok_or_else(|| OpError::NoDeployment(name.into()))
}

pub fn predict(client: &RegistryClient, name: &str, input: &Path) -> Result<Prediction, OpError> {
    let text = std::fs::read_to_string(input).map_err(|e| OpError::InvalidInput(format!("{}: {e}", input.display())))?;
    let body: Value =
        serde_json::from_str(&text).map_err(|e| OpError::InvalidInput(format!("{}: {e}", input.display())))?;
    let (version, endpoint) = deployment(client, name)?;
    let agent = ureq::AgentBuilder::new()
        .timeout_connect(Duration::from_secs(5))
        .timeout(Duration::from_secs(60))
        .build();
    let response = match agent.post(&format!("{endpoint}/predict")).send_json(body) {
        Ok(r) => r.into_json::<Value>().map_err(|e| OpError::Predict(e.to_string()))?,
        Err(ureq::Error::Status(code, r)) => {
            let body: Value = r.into_json().unwrap_or(Value::Null);
            let message = body["message"].as_str().map_or_else(|| body.to_string(), str::to_string);
            return Err(OpError::Predict(format!("{endpoint} answered {code}: {message}")));
        }
        Err(e) => return Err(OpError::Predict(format!("{endpoint}: {e}"))),
    };
    Ok(Prediction {
        model_name: name.into(),
        version: version.version,
        endpoint,
        response,
    })
}
