//! The experiment-tracking client interface the trainer logs through.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RunStatus {
    Running,
    Finished,
    Failed,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Running => "RUNNING",
            RunStatus::Finished => "FINISHED",
            RunStatus::Failed => "FAILED",
        })
    }
}

#[derive(Debug, Error)]
#[error("tracking failed: {0}")]
pub struct TrackerError(pub String);

pub trait Tracker {
    fn create_run(&mut self, experiment: &str) -> Result<String, TrackerError>;
    fn log_param(&mut self, run_id: &str, key: &str, value: &str) -> Result<(), TrackerError>;
    fn log_metric(&mut self, run_id: &str, key: &str, step: i64, value: f64)
        -> Result<(), TrackerError>;
    fn log_artifact(&mut self, run_id: &str, name: &str, bytes: &[u8]) -> Result<(), TrackerError>;
    fn finish_run(&mut self, run_id: &str, status: RunStatus) -> Result<(), TrackerError>;
}

/// Where a training run should be recorded.
pub struct Tracking<'a> {
    pub tracker: &'a mut dyn Tracker,
    pub experiment: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordedRun {
    pub experiment: String,
    pub status: Option<RunStatus>,
    pub params: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, Vec<(i64, f64)>>,
    pub artifacts: BTreeMap<String, Vec<u8>>,
}

/// In-process tracker that keeps everything in memory.
#[derive(Debug, Default)]
pub struct MemoryTracker {
    pub runs: BTreeMap<String, RecordedRun>,
}

impl MemoryTracker {
    fn run(&mut self, id: &str) -> Result<&mut RecordedRun, TrackerError> {
        self.runs
            .get_mut(id)
            .ok_or_else(|| TrackerError(format!("unknown run {id}")))
    }
}

impl Tracker for MemoryTracker {
    fn create_run(&mut self, experiment: &str) -> Result<String, TrackerError> {
        let id = format!("{:032x}", self.runs.len() + 1);
        self.runs.insert(
            id.clone(),
            RecordedRun {
                experiment: experiment.to_string(),
                status: Some(RunStatus::Running),
                ..Default::default()
            },
        );
        Ok(id)
    }

    fn log_param(&mut self, run_id: &str, key: &str, value: &str) -> Result<(), TrackerError> {
        let run = self.run(run_id)?;
        match run.params.get(key) {
            Some(old) if old != value => Err(TrackerError(format!("param {key} already set"))),
            _ => {
                run.params.insert(key.to_string(), value.to_string());
                Ok(())
            }
        }
    }

    fn log_metric(
        &mut self,
        run_id: &str,
        key: &str,
        step: i64,
        value: f64,
    ) -> Result<(), TrackerError> {
        let series = self.run(run_id)?.metrics.entry(key.to_string()).or_default();
        if series.last().is_some_and(|(s, _)| *s >= step) {
            return Err(TrackerError(format!("metric {key} step {step} not increasing")));
        }
        series.push((step, value));
        Ok(())
    }

    fn log_artifact(&mut self, run_id: &str, name: &str, bytes: &[u8]) -> Result<(), TrackerError> {
        self.run(run_id)?
            .artifacts
            .insert(name.to_string(), bytes.to_vec());
        Ok(())
    }

    fn finish_run(&mut self, run_id: &str, status: RunStatus) -> Result<(), TrackerError> {
        self.run(run_id)?.status = Some(status);
        Ok(())
    }
}
