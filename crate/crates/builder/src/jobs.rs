//! Build jobs and their durable journal, plus the watcher's event cursor.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use dpm_core::time::{serde_ts, Timestamp};
use serde::{Deserialize, Serialize};

pub const JOBS_FILE: &str = "jobs.jsonl";
pub const CURSOR_FILE: &str = "cursor";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Pending,
    Building,
    Deploying,
    Ready,
    Failed,
}

impl JobState {
    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Pending => "PENDING",
            JobState::Building => "BUILDING",
            JobState::Deploying => "DEPLOYING",
            JobState::Ready => "READY",
            JobState::Failed => "FAILED",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Ready | JobState::Failed)
    }

    /// Allowed edges: PENDING→BUILDING→DEPLOYING→READY, and any live state to FAILED.
    pub fn can_move_to(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Pending, Building) | (Building, Deploying) | (Deploying, Ready)
        ) || (!self.is_terminal() && next == Failed)
    }
}

impl std::fmt::Display for JobState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildJob {
    pub job_id: String,
    pub model_name: String,
    pub version: u64,
    /// The promotion event that created the job.
    pub event_id: u64,
    pub state: JobState,
    pub attempts: u32,
    pub last_error: Option<String>,
    pub endpoint: Option<String>,
    /// Last terminal state acknowledged by the registry.
    pub reported: Option<JobState>,
    #[serde(with = "serde_ts")]
    pub created_at: Timestamp,
    #[serde(with = "serde_ts")]
    pub updated_at: Timestamp,
}

impl BuildJob {
    pub fn new(model_name: &str, version: u64, event_id: u64) -> Self {
        let now = now();
        Self {
            job_id: job_id(model_name, version, event_id),
            model_name: model_name.to_string(),
            version,
            event_id,
            state: JobState::Pending,
            attempts: 0,
            last_error: None,
            endpoint: None,
            reported: None,
            created_at: now,
            updated_at: now,
        }
    }
}

/// Deduplication key of a promotion: model, version and the promoting event.
pub fn job_id(model_name: &str, version: u64, event_id: u64) -> String {
    format!("{model_name}@{version}#{event_id}")
}

fn now() -> Timestamp {
    dpm_core::time::from_unix(chrono::Utc::now().timestamp())
}

struct Inner {
    file: File,
    jobs: BTreeMap<String, BuildJob>,
}

/// Append-only journal of job snapshots; the latest snapshot per job wins on replay.
pub struct JobStore {
    dir: PathBuf,
    inner: Mutex<Inner>,
    cursor: Mutex<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum JobStoreError {
    #[error("job journal corrupt at line {0}")]
    Corrupt(usize),
    #[error("illegal job transition {from} -> {to} for {job_id}")]
    IllegalTransition { job_id: String, from: JobState, to: JobState },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Complete lines of the journal, dropping a torn tail. Returns the byte length kept.
fn read_history(bytes: &[u8]) -> Result<(Vec<BuildJob>, usize), JobStoreError> {
    let mut out = Vec::new();
    let mut valid = 0;
    for (i, line) in bytes.split_inclusive(|&b| b == b'\n').enumerate() {
        if line.last() != Some(&b'\n') {
            break;
        }
        let job = serde_json::from_slice(&line[..line.len() - 1]).map_err(|_| JobStoreError::Corrupt(i + 1))?;
        out.push(job);
        valid += line.len();
    }
    Ok((out, valid))
}

impl JobStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, JobStoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(dir.join(JOBS_FILE))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (history, valid) = read_history(&bytes)?;
        if valid < bytes.len() {
            file.set_len(valid as u64)?;
            file.sync_all()?;
        }
        let jobs = history.into_iter().map(|j| (j.job_id.clone(), j)).collect();
        let cursor = read_cursor(&dir)?;
        Ok(Self {
            dir,
            inner: Mutex::new(Inner { file, jobs }),
            cursor: Mutex::new(cursor),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn append(inner: &mut Inner, job: &BuildJob) -> io::Result<()> {
        let mut line = serde_json::to_vec(job).expect("job serializes");
        line.push(b'\n');
        inner.file.write_all(&line)?;
        inner.file.sync_data()
    }

    /// Records a new job unless its key is already known. Returns whether it was new.
    pub fn insert_if_new(&self, job: &BuildJob) -> Result<bool, JobStoreError> {
        let mut inner = self.lock();
        if inner.jobs.contains_key(&job.job_id) {
            return Ok(false);
        }
        Self::append(&mut inner, job)?;
        inner.jobs.insert(job.job_id.clone(), job.clone());
        Ok(true)
    }

    /// Persists a new snapshot of an existing job, enforcing the state machine.
    pub fn update(&self, job: &mut BuildJob) -> Result<(), JobStoreError> {
        let mut inner = self.lock();
        let from = inner.jobs.get(&job.job_id).map_or(JobState::Pending, |j| j.state);
        if from != job.state && !from.can_move_to(job.state) {
            return Err(JobStoreError::IllegalTransition {
                job_id: job.job_id.clone(),
                from,
                to: job.state,
            });
        }
        job.updated_at = now();
        Self::append(&mut inner, job)?;
        inner.jobs.insert(job.job_id.clone(), job.clone());
        Ok(())
    }

    pub fn get(&self, job_id: &str) -> Option<BuildJob> {
        self.lock().jobs.get(job_id).cloned()
    }

    /// All jobs in promotion order.
    pub fn jobs(&self) -> Vec<BuildJob> {
        let mut jobs: Vec<BuildJob> = self.lock().jobs.values().cloned().collect();
        jobs.sort_by_key(|j| j.event_id);
        jobs
    }

    pub fn cursor(&self) -> u64 {
        *self.cursor.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Durably moves the event cursor.
    pub fn set_cursor(&self, cursor: u64) -> io::Result<()> {
        let mut current = self.cursor.lock().unwrap_or_else(|e| e.into_inner());
        if *current == cursor {
            return Ok(());
        }
        let tmp = self.dir.join(format!("{CURSOR_FILE}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(format!("{cursor}\n").as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join(CURSOR_FILE))?;
        File::open(&self.dir)?.sync_all()?;
        *current = cursor;
        Ok(())
    }

    /// Every snapshot in the journal, oldest first, without opening it for writing.
    pub fn history(dir: impl AsRef<Path>) -> Result<Vec<BuildJob>, JobStoreError> {
        match fs::read(dir.as_ref().join(JOBS_FILE)) {
            Ok(bytes) => Ok(read_history(&bytes)?.0),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    /// Latest snapshot of each job, read-only.
    pub fn snapshot(dir: impl AsRef<Path>) -> Result<Vec<BuildJob>, JobStoreError> {
        let mut latest: BTreeMap<String, BuildJob> = BTreeMap::new();
        for job in Self::history(dir)? {
            latest.insert(job.job_id.clone(), job);
        }
        let mut jobs: Vec<BuildJob> = latest.into_values().collect();
        jobs.sort_by_key(|j| j.event_id);
        Ok(jobs)
    }
}

fn read_cursor(dir: &Path) -> io::Result<u64> {
    match fs::read_to_string(dir.join(CURSOR_FILE)) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "cursor file is not a number")),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(0),
        Err(e) => Err(e),
    }
}
