//! Embedded persistence: an fsynced JSON-lines journal of mutations plus a content-addressed
//! artifact directory. State and the event log are rebuilt by replaying the journal.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use dpm_core::time::from_unix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::*;

const JOURNAL_FILE: &str = "journal.jsonl";
const ARTIFACT_DIR: &str = "artifacts";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("run {0} is not active")]
    RunNotActive(String),
    #[error("param {key} already set to a different value")]
    ParamConflict { key: String },
    #[error("metric {key} step {step} does not follow step {last}")]
    MetricStepRegression { key: String, step: i64, last: i64 },
    #[error("run {0} is not finished")]
    RunNotFinished(String),
    #[error("unknown artifact {0}")]
    UnknownArtifact(String),
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error("unknown version {name} v{version}")]
    UnknownVersion { name: String, version: u64 },
    #[error("invalid stage: {0}")]
    InvalidStage(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("journal corrupt at line {line}: {detail}")]
    JournalCorrupt { line: usize, detail: String },
    #[error("storage failure: {0}")]
    Io(#[from] io::Error),
}

impl RegistryError {
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::UnknownRun(_) => "UnknownRun",
            RegistryError::RunNotActive(_) => "RunNotActive",
            RegistryError::ParamConflict { .. } => "ParamConflict",
            RegistryError::MetricStepRegression { .. } => "MetricStepRegression",
            RegistryError::RunNotFinished(_) => "RunNotFinished",
            RegistryError::UnknownArtifact(_) => "UnknownArtifact",
            RegistryError::UnknownModel(_) => "UnknownModel",
            RegistryError::UnknownVersion { .. } => "UnknownVersion",
            RegistryError::InvalidStage(_) => "InvalidStage",
            RegistryError::InvalidRequest(_) => "InvalidRequest",
            RegistryError::JournalCorrupt { .. } => "JournalCorrupt",
            RegistryError::Io(_) => "StorageFailure",
        }
    }
}

pub type Result<T> = std::result::Result<T, RegistryError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Record {
    CreateRun {
        run_id: String,
        experiment: String,
        at: i64,
    },
    LogParam {
        run_id: String,
        key: String,
        value: String,
    },
    LogMetric {
        run_id: String,
        key: String,
        step: i64,
        value: f64,
        at: i64,
    },
    LogArtifact {
        run_id: String,
        artifact: ArtifactRef,
    },
    FinishRun {
        run_id: String,
        status: RunStatus,
        at: i64,
    },
    CreateVersion {
        model_name: String,
        version: u64,
        run_id: String,
        artifact_name: String,
        artifact_sha256: String,
        at: i64,
    },
    Transition {
        model_name: String,
        version: u64,
        stage: Stage,
        at: i64,
    },
    SetVersionTag {
        model_name: String,
        version: u64,
        key: String,
        value: String,
        at: i64,
    },
}

#[derive(Debug, Default)]
struct State {
    runs: HashMap<String, Run>,
    run_order: Vec<String>,
    models: BTreeMap<String, Vec<ModelVersion>>,
    events: Vec<Event>,
}

impl State {
    fn run(&self, id: &str) -> Result<&Run> {
        self.runs
            .get(id)
            .ok_or_else(|| RegistryError::UnknownRun(id.to_string()))
    }

    fn active_run(&self, id: &str) -> Result<&Run> {
        let run = self.run(id)?;
        if run.status != RunStatus::Running {
            return Err(RegistryError::RunNotActive(id.to_string()));
        }
        Ok(run)
    }

    fn version(&self, name: &str, version: u64) -> Result<&ModelVersion> {
        self.models
            .get(name)
            .and_then(|vs| vs.iter().find(|v| v.version == version))
            .ok_or_else(|| RegistryError::UnknownVersion {
                name: name.to_string(),
                version,
            })
    }

    fn version_mut(&mut self, name: &str, version: u64) -> &mut ModelVersion {
        self.models
            .get_mut(name)
            .and_then(|vs| vs.iter_mut().find(|v| v.version == version))
            .expect("validated before apply")
    }

    fn emit(&mut self, kind: EventKind, payload: serde_json::Value, at: i64) {
        let event_id = self.events.len() as u64 + 1;
        self.events.push(Event {
            event_id,
            kind,
            payload,
            at: from_unix(at),
        });
    }

    fn apply(&mut self, record: Record) {
        match record {
            Record::CreateRun {
                run_id,
                experiment,
                at,
            } => {
                self.run_order.push(run_id.clone());
                self.runs.insert(
                    run_id.clone(),
                    Run {
                        run_id,
                        experiment,
                        status: RunStatus::Running,
                        params: BTreeMap::new(),
                        metrics: BTreeMap::new(),
                        tags: BTreeMap::new(),
                        artifacts: Vec::new(),
                        created_at: from_unix(at),
                    },
                );
            }
            Record::LogParam { run_id, key, value } => {
                self.runs.get_mut(&run_id).unwrap().params.insert(key, value);
            }
            Record::LogMetric {
                run_id,
                key,
                step,
                value,
                at,
            } => {
                let run = self.runs.get_mut(&run_id).unwrap();
                run.metrics.entry(key).or_default().push(MetricPoint {
                    step,
                    value,
                    at: from_unix(at),
                });
            }
            Record::LogArtifact { run_id, artifact } => {
                let run = self.runs.get_mut(&run_id).unwrap();
                run.artifacts.retain(|a| a.name != artifact.name);
                run.artifacts.push(artifact);
            }
            Record::FinishRun { run_id, status, at } => {
                let run = self.runs.get_mut(&run_id).unwrap();
                run.status = status;
                let payload = serde_json::json!({
                    "run_id": run_id,
                    "experiment": run.experiment,
                    "status": status,
                });
                self.emit(EventKind::RunFinished, payload, at);
            }
            Record::CreateVersion {
                model_name,
                version,
                run_id,
                artifact_name,
                artifact_sha256,
                at,
            } => {
                let payload = serde_json::json!({
                    "model_name": model_name,
                    "version": version,
                    "run_id": run_id,
                });
                self.models
                    .entry(model_name.clone())
                    .or_default()
                    .push(ModelVersion {
                        model_name,
                        version,
                        run_id,
                        artifact_name,
                        artifact_sha256,
                        stage: Stage::None,
                        tags: BTreeMap::new(),
                        created_at: from_unix(at),
                    });
                self.emit(EventKind::VersionCreated, payload, at);
            }
            Record::Transition {
                model_name,
                version,
                stage,
                at,
            } => {
                let previous = if stage == Stage::Production {
                    self.models[&model_name]
                        .iter()
                        .find(|v| v.stage == Stage::Production && v.version != version)
                        .map(|v| v.version)
                } else {
                    None
                };
                let target = self.version_mut(&model_name, version);
                let from = target.stage;
                target.stage = stage;
                self.emit(
                    EventKind::StageChanged,
                    serde_json::json!({
                        "model_name": model_name,
                        "version": version,
                        "from": from,
                        "to": stage,
                    }),
                    at,
                );
                if let Some(old) = previous {
                    self.version_mut(&model_name, old).stage = Stage::Archived;
                    self.emit(
                        EventKind::StageChanged,
                        serde_json::json!({
                            "model_name": model_name,
                            "version": old,
                            "from": Stage::Production,
                            "to": Stage::Archived,
                        }),
                        at,
                    );
                }
            }
            Record::SetVersionTag {
                model_name,
                version,
                key,
                value,
                at,
            } => {
                self.version_mut(&model_name, version)
                    .tags
                    .insert(key.clone(), value.clone());
                self.emit(
                    EventKind::VersionTagged,
                    serde_json::json!({
                        "model_name": model_name,
                        "version": version,
                        "key": key,
                        "value": value,
                    }),
                    at,
                );
            }
        }
    }
}

struct Inner {
    state: State,
    journal: File,
    journal_len: u64,
}

/// The registry store. Every mutation is validated, appended to the journal and synced
/// before it is applied, all under one lock.
pub struct Registry {
    dir: PathBuf,
    sync: bool,
    inner: Mutex<Inner>,
}

fn now() -> i64 {
    chrono::Utc::now().timestamp()
}

fn check_value(what: &str, value: &str) -> Result<()> {
    if value.len() > MAX_VALUE_BYTES {
        return Err(RegistryError::InvalidRequest(format!(
            "{what} exceeds {MAX_VALUE_BYTES} bytes"
        )));
    }
    Ok(())
}

fn check_name(what: &str, name: &str) -> Result<()> {
    if name.is_empty() || name.len() > 256 || name.contains('/') || name.chars().any(char::is_control)
    {
        return Err(RegistryError::InvalidRequest(format!("invalid {what} {name:?}")));
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Registry {
    /// Opens (or creates) a registry in `dir`, replaying its journal. A torn final line left
    /// by a crash mid-append is discarded.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        Self::open_with(dir, true)
    }

    /// As [`Registry::open`]; `sync = false` skips fsync (tests of logic only).
    pub fn open_with(dir: impl AsRef<Path>, sync: bool) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join(ARTIFACT_DIR))?;
        let path = dir.join(JOURNAL_FILE);
        let mut journal = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        let mut bytes = Vec::new();
        journal.read_to_end(&mut bytes)?;

        let mut state = State::default();
        let mut valid = 0usize;
        for (i, line) in bytes.split_inclusive(|&b| b == b'\n').enumerate() {
            if line.last() != Some(&b'\n') {
                break;
            }
            let record: Record = serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| {
                RegistryError::JournalCorrupt {
                    line: i + 1,
                    detail: e.to_string(),
                }
            })?;
            state.apply(record);
            valid += line.len();
        }
        if valid < bytes.len() {
            tracing::warn!(bytes = bytes.len() - valid, "discarding torn journal tail");
            journal.set_len(valid as u64)?;
            journal.sync_all()?;
        }
        if sync {
            File::open(&dir)?.sync_all()?;
        }
        Ok(Self {
            dir,
            sync,
            inner: Mutex::new(Inner {
                state,
                journal,
                journal_len: valid as u64,
            }),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.dir
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Validates against the current state, then journals and applies. `plan` returns
    /// `None` for an idempotent no-op.
    fn commit<T>(
        &self,
        plan: impl FnOnce(&State) -> Result<Option<Record>>,
        read: impl FnOnce(&State) -> T,
    ) -> Result<T> {
        let mut inner = self.lock();
        if let Some(record) = plan(&inner.state)? {
            let mut line = serde_json::to_vec(&record).expect("record serializes");
            line.push(b'\n');
            let written = inner.journal.write_all(&line).and_then(|()| {
                if self.sync {
                    inner.journal.sync_data()
                } else {
                    Ok(())
                }
            });
            if let Err(e) = written {
                let len = inner.journal_len;
                let _ = inner.journal.set_len(len);
                return Err(e.into());
            }
            inner.journal_len += line.len() as u64;
            inner.state.apply(record);
        }
        Ok(read(&inner.state))
    }

    pub fn create_run(&self, experiment: &str) -> Result<Run> {
        check_name("experiment", experiment)?;
        let run_id = hex::encode(rand::random::<[u8; 16]>());
        let id = run_id.clone();
        self.commit(
            |_| {
                Ok(Some(Record::CreateRun {
                    run_id,
                    experiment: experiment.to_string(),
                    at: now(),
                }))
            },
            |s| s.runs[&id].clone(),
        )
    }

    pub fn log_param(&self, run_id: &str, key: &str, value: &str) -> Result<()> {
        check_name("param key", key)?;
        check_value("param value", value)?;
        self.commit(
            |s| {
                let run = s.active_run(run_id)?;
                match run.params.get(key) {
                    Some(old) if old == value => Ok(None),
                    Some(_) => Err(RegistryError::ParamConflict {
                        key: key.to_string(),
                    }),
                    None => Ok(Some(Record::LogParam {
                        run_id: run_id.to_string(),
                        key: key.to_string(),
                        value: value.to_string(),
                    })),
                }
            },
            |_| (),
        )
    }

    /// Steps must strictly increase per key; resending the last point is a no-op.
    pub fn log_metric(&self, run_id: &str, key: &str, step: i64, value: f64) -> Result<()> {
        check_name("metric key", key)?;
        if !value.is_finite() {
            return Err(RegistryError::InvalidRequest("metric value must be finite".into()));
        }
        self.commit(
            |s| {
                let run = s.active_run(run_id)?;
                if let Some(last) = run.metrics.get(key).and_then(|v| v.last()) {
                    if last.step == step && last.value.to_bits() == value.to_bits() {
                        return Ok(None);
                    }
                    if step <= last.step {
                        return Err(RegistryError::MetricStepRegression {
                            key: key.to_string(),
                            step,
                            last: last.step,
                        });
                    }
                }
                Ok(Some(Record::LogMetric {
                    run_id: run_id.to_string(),
                    key: key.to_string(),
                    step,
                    value,
                    at: now(),
                }))
            },
            |_| (),
        )
    }

    pub fn log_artifact(&self, run_id: &str, name: &str, bytes: &[u8]) -> Result<ArtifactRef> {
        check_name("artifact name", name)?;
        self.lock().state.active_run(run_id)?;
        let sha256 = self.put_blob(bytes)?;
        let artifact = ArtifactRef {
            name: name.to_string(),
            sha256,
            size: bytes.len() as u64,
        };
        let stored = artifact.clone();
        self.commit(
            |s| {
                let run = s.active_run(run_id)?;
                if run.artifact(name) == Some(&artifact) {
                    return Ok(None);
                }
                Ok(Some(Record::LogArtifact {
                    run_id: run_id.to_string(),
                    artifact,
                }))
            },
            |_| stored,
        )
    }

    pub fn finish_run(&self, run_id: &str, status: RunStatus) -> Result<Run> {
        if status == RunStatus::Running {
            return Err(RegistryError::InvalidRequest(
                "a run can only finish as FINISHED or FAILED".into(),
            ));
        }
        self.commit(
            |s| {
                let run = s.run(run_id)?;
                match run.status {
                    RunStatus::Running => Ok(Some(Record::FinishRun {
                        run_id: run_id.to_string(),
                        status,
                        at: now(),
                    })),
                    done if done == status => Ok(None),
                    _ => Err(RegistryError::RunNotActive(run_id.to_string())),
                }
            },
            |s| s.runs[run_id].clone(),
        )
    }

    pub fn get_run(&self, run_id: &str) -> Result<Run> {
        self.lock().state.run(run_id).cloned()
    }

    /// Runs in creation order, optionally of one experiment.
    pub fn list_runs(&self, experiment: Option<&str>) -> Vec<Run> {
        let inner = self.lock();
        inner
            .state
            .run_order
            .iter()
            .map(|id| &inner.state.runs[id])
            .filter(|r| experiment.is_none_or(|e| r.experiment == e))
            .cloned()
            .collect()
    }

    pub fn register_model(
        &self,
        run_id: &str,
        model_name: &str,
        artifact_name: &str,
    ) -> Result<ModelVersion> {
        check_name("model name", model_name)?;
        self.commit(
            |s| {
                let run = s.run(run_id)?;
                if run.status != RunStatus::Finished {
                    return Err(RegistryError::RunNotFinished(run_id.to_string()));
                }
                let artifact = run
                    .artifact(artifact_name)
                    .ok_or_else(|| RegistryError::UnknownArtifact(artifact_name.to_string()))?;
                let version = s
                    .models
                    .get(model_name)
                    .and_then(|vs| vs.iter().map(|v| v.version).max())
                    .unwrap_or(0)
                    + 1;
                Ok(Some(Record::CreateVersion {
                    model_name: model_name.to_string(),
                    version,
                    run_id: run_id.to_string(),
                    artifact_name: artifact_name.to_string(),
                    artifact_sha256: artifact.sha256.clone(),
                    at: now(),
                }))
            },
            |s| s.models[model_name].last().cloned().expect("version just created"),
        )
    }

    /// Moves a version to `stage`. Promotion to Production archives the previous Production
    /// version in the same journal record.
    pub fn transition_stage(&self, model_name: &str, version: u64, stage: Stage) -> Result<ModelVersion> {
        self.commit(
            |s| {
                let current = s.version(model_name, version)?;
                if current.stage == stage {
                    return Ok(None);
                }
                Ok(Some(Record::Transition {
                    model_name: model_name.to_string(),
                    version,
                    stage,
                    at: now(),
                }))
            },
            |s| s.version(model_name, version).cloned(),
        )?
    }

    pub fn set_version_tag(&self, model_name: &str, version: u64, key: &str, value: &str) -> Result<ModelVersion> {
        check_name("tag key", key)?;
        check_value("tag value", value)?;
        self.commit(
            |s| {
                s.version(model_name, version)?;
                Ok(Some(Record::SetVersionTag {
                    model_name: model_name.to_string(),
                    version,
                    key: key.to_string(),
                    value: value.to_string(),
                    at: now(),
                }))
            },
            |s| s.version(model_name, version).cloned(),
        )?
    }

    pub fn get_version(&self, model_name: &str, version: u64) -> Result<ModelVersion> {
        self.lock().state.version(model_name, version).cloned()
    }

    pub fn get_model(&self, model_name: &str) -> Result<RegisteredModel> {
        let inner = self.lock();
        let versions = inner
            .state
            .models
            .get(model_name)
            .ok_or_else(|| RegistryError::UnknownModel(model_name.to_string()))?;
        Ok(RegisteredModel {
            name: model_name.to_string(),
            versions: versions.clone(),
        })
    }

    pub fn list_models(&self) -> Vec<RegisteredModel> {
        let inner = self.lock();
        inner
            .state
            .models
            .iter()
            .map(|(name, versions)| RegisteredModel {
                name: name.clone(),
                versions: versions.clone(),
            })
            .collect()
    }

    /// Events with id greater than `after`, oldest first.
    pub fn poll_events(&self, after: u64, limit: usize) -> Vec<Event> {
        let inner = self.lock();
        let start = (after as usize).min(inner.state.events.len());
        inner.state.events[start..]
            .iter()
            .take(limit)
            .cloned()
            .collect()
    }

    pub fn last_event_id(&self) -> u64 {
        self.lock().state.events.len() as u64
    }

    fn blob_path(&self, sha256: &str) -> PathBuf {
        self.dir.join(ARTIFACT_DIR).join(&sha256[..2]).join(sha256)
    }

    fn put_blob(&self, bytes: &[u8]) -> Result<String> {
        let sha256 = sha256_hex(bytes);
        let path = self.blob_path(&sha256);
        if path.exists() {
            return Ok(sha256);
        }
        let parent = path.parent().expect("blob path has a parent");
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(".{}.{}", sha256, hex::encode(rand::random::<[u8; 8]>())));
        let mut file = File::create(&tmp)?;
        file.write_all(bytes)?;
        if self.sync {
            file.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        if self.sync {
            File::open(parent)?.sync_all()?;
        }
        Ok(sha256)
    }

    /// Stored bytes for a hash, as they are on disk.
    pub fn artifact_bytes(&self, sha256: &str) -> Result<Vec<u8>> {
        if sha256.len() != 64 || !sha256.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(RegistryError::UnknownArtifact(sha256.to_string()));
        }
        fs::read(self.blob_path(&sha256.to_ascii_lowercase())).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => RegistryError::UnknownArtifact(sha256.to_string()),
            _ => e.into(),
        })
    }

    /// On-disk location of a stored artifact.
    pub fn artifact_path(&self, sha256: &str) -> PathBuf {
        self.blob_path(sha256)
    }
}

impl dpm_core::lightsaber::Tracker for &Registry {
    fn create_run(&mut self, experiment: &str) -> std::result::Result<String, dpm_core::lightsaber::TrackerError> {
        Registry::create_run(self, experiment).map(|r| r.run_id).map_err(tracker_error)
    }

    fn log_param(&mut self, run_id: &str, key: &str, value: &str) -> std::result::Result<(), dpm_core::lightsaber::TrackerError> {
        Registry::log_param(self, run_id, key, value).map_err(tracker_error)
    }

    fn log_metric(&mut self, run_id: &str, key: &str, step: i64, value: f64) -> std::result::Result<(), dpm_core::lightsaber::TrackerError> {
        Registry::log_metric(self, run_id, key, step, value).map_err(tracker_error)
    }

    fn log_artifact(&mut self, run_id: &str, name: &str, bytes: &[u8]) -> std::result::Result<(), dpm_core::lightsaber::TrackerError> {
        Registry::log_artifact(self, run_id, name, bytes).map(drop).map_err(tracker_error)
    }

    fn finish_run(&mut self, run_id: &str, status: RunStatus) -> std::result::Result<(), dpm_core::lightsaber::TrackerError> {
        Registry::finish_run(self, run_id, status).map(drop).map_err(tracker_error)
    }
}

fn tracker_error(e: RegistryError) -> dpm_core::lightsaber::TrackerError {
    dpm_core::lightsaber::TrackerError(e.to_string())
}
