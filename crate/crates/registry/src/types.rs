use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use dpm_core::time::{serde_ts, Timestamp};
use serde::{Deserialize, Serialize};

pub use dpm_core::lightsaber::RunStatus;

/// Longest accepted param or tag value, in bytes.
pub const MAX_VALUE_BYTES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub step: i64,
    pub value: f64,
    #[serde(with = "serde_ts")]
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub name: String,
    pub sha256: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub run_id: String,
    pub experiment: String,
    pub status: RunStatus,
    pub params: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, Vec<MetricPoint>>,
    pub tags: BTreeMap<String, String>,
    pub artifacts: Vec<ArtifactRef>,
    #[serde(with = "serde_ts")]
    pub created_at: Timestamp,
}

impl Run {
    pub fn artifact(&self, name: &str) -> Option<&ArtifactRef> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    /// Last value of each metric series.
    pub fn final_metrics(&self) -> BTreeMap<String, f64> {
        self.metrics
            .iter()
            .filter_map(|(k, v)| v.last().map(|p| (k.clone(), p.value)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    None,
    Staging,
    Production,
    Archived,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::None => "None",
            Stage::Staging => "Staging",
            Stage::Production => "Production",
            Stage::Archived => "Archived",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Stage::None),
            "staging" => Ok(Stage::Staging),
            "production" => Ok(Stage::Production),
            "archived" => Ok(Stage::Archived),
            _ => Err(format!("unknown stage {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub model_name: String,
    pub version: u64,
    pub run_id: String,
    pub artifact_name: String,
    pub artifact_sha256: String,
    pub stage: Stage,
    pub tags: BTreeMap<String, String>,
    #[serde(with = "serde_ts")]
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisteredModel {
    pub name: String,
    pub versions: Vec<ModelVersion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    RunFinished,
    VersionCreated,
    StageChanged,
    VersionTagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: u64,
    pub kind: EventKind,
    pub payload: serde_json::Value,
    #[serde(with = "serde_ts")]
    pub at: Timestamp,
}

impl Event {
    /// `(model_name, version)` of a promotion to Production.
    pub fn promotion(&self) -> Option<(String, u64)> {
        if self.kind != EventKind::StageChanged || self.payload["to"] != "Production" {
            return None;
        }
        let name = self.payload["model_name"].as_str()?;
        let version = self.payload["version"].as_u64()?;
        Some((name.to_string(), version))
    }
}
