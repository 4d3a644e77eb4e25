//! Turns a registered model version into a self-sufficient serving bundle.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use dpm_core::lightsaber::TrainedModel;
use dpm_registry::{sha256_hex, ClientError, Event, ModelVersion, RegistryClient};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::serving::*;

/// The registry calls the builder makes.
pub trait RegistryApi: Send + Sync {
    fn poll_events(&self, after: u64, limit: usize) -> Result<Vec<Event>, ClientError>;
    fn get_version(&self, name: &str, version: u64) -> Result<ModelVersion, ClientError>;
    fn fetch_artifact(&self, sha256: &str) -> Result<Vec<u8>, ClientError>;
    fn set_version_tag(&self, name: &str, version: u64, key: &str, value: &str) -> Result<(), ClientError>;
}

impl RegistryApi for RegistryClient {
    fn poll_events(&self, after: u64, limit: usize) -> Result<Vec<Event>, ClientError> {
        RegistryClient::poll_events(self, after, limit)
    }

    fn get_version(&self, name: &str, version: u64) -> Result<ModelVersion, ClientError> {
        RegistryClient::get_version(self, name, version)
    }

    fn fetch_artifact(&self, sha256: &str) -> Result<Vec<u8>, ClientError> {
        RegistryClient::fetch_artifact(self, sha256)
    }

    fn set_version_tag(&self, name: &str, version: u64, key: &str, value: &str) -> Result<(), ClientError> {
        RegistryClient::set_version_tag(self, name, version, key, value).map(drop)
    }
}

#[derive(Debug, Error)]
pub enum PackageError {
    #[error("unknown version {name} v{version}")]
    UnknownVersion { name: String, version: u64 },
    #[error("artifact {0} is missing from the registry")]
    MissingArtifact(String),
    #[error("artifact hash mismatch: expected {expected}, got {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("artifact is not a loadable model: {0}")]
    InvalidModel(String),
    #[error("registry error: {0}")]
    Registry(ClientError),
    #[error("bundle write failed: {0}")]
    Io(#[from] io::Error),
}

impl PackageError {
    pub fn is_transient(&self) -> bool {
        match self {
            PackageError::Registry(e) => e.is_transient(),
            PackageError::Io(_) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dependency {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackageRecipe {
    pub bundle_dir: PathBuf,
    /// Bundle files the container recipe copies, in copy order.
    pub files: Vec<String>,
    pub containerfile: String,
    pub dependencies: Vec<Dependency>,
    pub config: ServingConfig,
}

pub const SERVING_RUNTIME_IMAGE: &str = "dpm-serving-runtime";
const SERVING_PORT: u16 = 8080;

pub fn dependencies() -> Vec<Dependency> {
    let v = env!("CARGO_PKG_VERSION").to_string();
    vec![
        Dependency { name: "dpm-builder".into(), version: v.clone() },
        Dependency { name: "dpm-core".into(), version: v.clone() },
        Dependency { name: SERVING_RUNTIME_IMAGE.into(), version: v },
    ]
}

/// Container build recipe for a bundle. Pure function of its inputs.
pub fn containerfile(config: &ServingConfig, files: &[String], deps: &[Dependency]) -> String {
    let runtime = deps
        .iter()
        .find(|d| d.name == SERVING_RUNTIME_IMAGE)
        .map_or("latest", |d| d.version.as_str());
    let mut out = String::new();
    out.push_str(&format!("FROM {SERVING_RUNTIME_IMAGE}:{runtime}\n"));
    out.push_str(&format!("LABEL dpm.model.name={:?}\n", config.model_name));
    out.push_str(&format!("LABEL dpm.model.version=\"{}\"\n", config.version));
    out.push_str(&format!("LABEL dpm.model.sha256=\"{}\"\n", config.artifact_sha256));
    for d in deps {
        out.push_str(&format!("LABEL dpm.dependency.{}=\"{}\"\n", d.name, d.version));
    }
    out.push_str("WORKDIR /srv/model\n");
    for f in files {
        out.push_str(&format!("COPY {f} /srv/model/{f}\n"));
    }
    out.push_str(&format!("EXPOSE {SERVING_PORT}\n"));
    out.push_str(&format!(
        "ENTRYPOINT [\"dpm\", \"serve-model\", \"--bundle\", \"/srv/model\", \"--addr\", \"0.0.0.0:{SERVING_PORT}\"]\n"
    ));
    out
}

/// Directory name for a model that is safe on any filesystem and distinct per name.
pub fn model_dir_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(64)
        .collect();
    format!("{safe}-{}", &sha256_hex(name.as_bytes())[..8])
}

fn registry_error(e: ClientError, name: &str, version: u64) -> PackageError {
    match e.code() {
        Some("UnknownVersion" | "UnknownModel") => PackageError::UnknownVersion { name: name.to_string(), version },
        _ => PackageError::Registry(e),
    }
}

fn write_synced(path: &Path, bytes: &[u8]) -> io::Result<()> {
    use std::io::Write;
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()
}

/// Downloads and verifies the version's artifact and writes the bundle under `root`.
pub fn package(api: &dyn RegistryApi, name: &str, version: u64, root: &Path) -> Result<PackageRecipe, PackageError> {
    let mv = api.get_version(name, version).map_err(|e| registry_error(e, name, version))?;
    let bytes = api.fetch_artifact(&mv.artifact_sha256).map_err(|e| match e.code() {
        Some("UnknownArtifact") => PackageError::MissingArtifact(mv.artifact_sha256.clone()),
        _ => PackageError::Registry(e),
    })?;
    let actual = sha256_hex(&bytes);
    if actual != mv.artifact_sha256 {
        return Err(PackageError::HashMismatch {
            expected: mv.artifact_sha256,
            actual,
        });
    }
    let model = TrainedModel::from_bytes(&bytes).map_err(|e| PackageError::InvalidModel(e.to_string()))?;

    let config = ServingConfig {
        model_name: name.to_string(),
        version,
        run_id: mv.run_id.clone(),
        artifact_sha256: mv.artifact_sha256.clone(),
        model_kind: model.spec.kind().to_string(),
        model_file: MODEL_FILE.to_string(),
        signature: model.signature(),
    };
    let deps = dependencies();
    let files: Vec<String> = [MODEL_FILE, PREPROCESSOR_FILE, SERVING_FILE, DEPENDENCIES_FILE]
        .map(String::from)
        .to_vec();
    let containerfile = containerfile(&config, &files, &deps);

    let parent = root.join(model_dir_name(name));
    fs::create_dir_all(&parent)?;
    let bundle_dir = parent.join(format!("v{version}"));
    let staging = parent.join(format!(".v{version}.tmp"));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    write_synced(&staging.join(MODEL_FILE), &bytes)?;
    write_synced(&staging.join(PREPROCESSOR_FILE), &pretty(&model.preprocessor))?;
    write_synced(&staging.join(SERVING_FILE), &pretty(&config))?;
    write_synced(&staging.join(DEPENDENCIES_FILE), &pretty(&deps))?;
    write_synced(&staging.join(CONTAINERFILE), containerfile.as_bytes())?;
    if bundle_dir.exists() {
        // A live server may still have the old bundle open; its files are identical.
        fs::remove_dir_all(&bundle_dir)?;
    }
    fs::rename(&staging, &bundle_dir)?;
    fs::File::open(&parent)?.sync_all()?;

    Ok(PackageRecipe {
        bundle_dir,
        files,
        containerfile,
        dependencies: deps,
        config,
    })
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serializes");
    out.push(b'\n');
    out
}
