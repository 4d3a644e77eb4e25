//! `dpm360.yaml`, environment overrides and the resolved stack configuration.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use dpm_core::cohort::{CohortDefinition, OutcomeDefinition};
use dpm_core::ehr::GeneratorSpec;
use dpm_core::features::CovariateSettings;
use dpm_core::lightsaber::{ModelSpec, SplitOptions, TrainerConfig};
use serde::{Deserialize, Serialize};

pub const DEFAULT_CONFIG_FILE: &str = "dpm360.yaml";
pub const DEFAULT_DATA_DIR: &str = ".dpm360";
pub const DEFAULT_REGISTRY_ADDR: &str = "127.0.0.1:5180";
pub const DEFAULT_PORT_RANGE: &str = "5300-5399";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: serde_yaml::Error },
    #[error("invalid {field}: {message}")]
    Invalid { field: &'static str, message: String },
}

/// The file layout. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    pub registry_addr: Option<String>,
    pub builder_state_dir: Option<PathBuf>,
    pub port_range: Option<String>,
    pub ui_dir: Option<PathBuf>,
    pub demo: DemoConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub experiment: String,
    /// Registered model names are `{model_prefix}-{kind}`.
    pub model_prefix: String,
    pub generator: GeneratorSpec,
    pub cohort: CohortDefinition,
    pub outcome: OutcomeDefinition,
    /// Empty `concept_ids` means every concept of the generated dictionary.
    pub covariates: CovariateSettings,
    pub split: SplitOptions,
    pub trainer: TrainerConfig,
    pub models: Vec<ModelSpec>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            experiment: "in_hospital_mortality".into(),
            model_prefix: "mortality".into(),
            generator: GeneratorSpec::default(),
            cohort: CohortDefinition::default(),
            outcome: OutcomeDefinition::default(),
            covariates: CovariateSettings::default(),
            split: SplitOptions::default(),
            trainer: TrainerConfig::default(),
            models: vec![
                ModelSpec::Linear { l2: 0.01 },
                ModelSpec::Recurrent {
                    hidden_size: 16,
                    layers: 1,
                    dropout: 0.1,
                },
            ],
        }
    }
}

/// Values given on the command line or through `DPM_*` variables; these win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data_dir: Option<PathBuf>,
    pub registry_addr: Option<String>,
    pub builder_state_dir: Option<PathBuf>,
    pub port_range: Option<String>,
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub data_dir: PathBuf,
    pub registry_addr: SocketAddr,
    pub builder_state_dir: PathBuf,
    pub ports: RangeInclusive<u16>,
    pub ui_dir: Option<PathBuf>,
    pub demo: DemoConfig,
}

impl StackConfig {
    /// Reads `path`, or `dpm360.yaml` in the working directory when it exists, and applies
    /// `overrides`.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, ConfigError> {
        let file = match path {
            Some(p) => read_file(p)?,
            None if Path::new(DEFAULT_CONFIG_FILE).is_file() => read_file(Path::new(DEFAULT_CONFIG_FILE))?,
            None => FileConfig::default(),
        };
        Self::resolve(file, overrides)
    }

    pub fn resolve(file: FileConfig, o: &Overrides) -> Result<Self, ConfigError> {
        let data_dir = o
            .data_dir
            .clone()
            .or(file.data_dir)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
        let data_dir = absolute(&data_dir);
        let addr = o
            .registry_addr
            .clone()
            .or(file.registry_addr)
            .unwrap_or_else(|| DEFAULT_REGISTRY_ADDR.into());
        let registry_addr = addr.parse().map_err(|e| ConfigError::Invalid {
            field: "registry_addr",
            message: format!("{addr:?}: {e}"),
        })?;
        let ports = o
            .port_range
            .clone()
            .or(file.port_range)
            .unwrap_or_else(|| DEFAULT_PORT_RANGE.into());
        let ports = dpm_builder::parse_port_range(&ports).map_err(|message| ConfigError::Invalid {
            field: "port_range",
            message,
        })?;
        let builder_state_dir = o
            .builder_state_dir
            .clone()
            .or(file.builder_state_dir)
            .map_or_else(|| data_dir.join("builder"), |p| absolute(&p));
        let ui_dir = o.ui_dir.clone().or(file.ui_dir).map(|p| absolute(&p));
        let mut demo = file.demo;
        if demo.models.is_empty() {
            return Err(ConfigError::Invalid {
                field: "demo.models",
                message: "at least one model is required".into(),
            });
        }
        if demo.covariates.concept_ids.is_empty() {
            demo.covariates.concept_ids = demo.generator.concept_ids();
        }
        Ok(Self {
            data_dir,
            registry_addr,
            builder_state_dir,
            ports,
            ui_dir,
            demo,
        })
    }

    pub fn registry_dir(&self) -> PathBuf {
        self.data_dir.join("registry")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.data_dir.join("run")
    }

    pub fn log_dir(&self) -> PathBuf {
        self.data_dir.join("logs")
    }

    pub fn demo_dir(&self) -> PathBuf {
        self.data_dir.join("demo")
    }

    /// Base URL clients use; a wildcard bind address is reached over loopback.
    pub fn registry_url(&self) -> String {
        let mut addr = self.registry_addr;
        if addr.ip().is_unspecified() {
            addr.set_ip(IpAddr::V4(Ipv4Addr::LOCALHOST));
        }
        format!("http://{addr}")
    }
}

fn read_file(path: &Path) -> Result<FileConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    if text.trim().is_empty() {
        return Ok(FileConfig::default());
    }
    serde_yaml::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map_or_else(|_| p.to_path_buf(), |d| d.join(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_beat_the_file_and_the_file_beats_defaults() {
        let file: FileConfig = serde_yaml::from_str(
            "data_dir: /tmp/from-file\nport_range: 6000-6009\ndemo:\n  generator:\n    signal_strength: 1.5\n",
        )
        .unwrap();
        let overrides = Overrides {
            data_dir: Some("/tmp/from-flag".into()),
            ..Default::default()
        };
        let c = StackConfig::resolve(file, &overrides).unwrap();
        assert_eq!(c.data_dir, PathBuf::from("/tmp/from-flag"));
        assert_eq!(c.ports, 6000..=6009);
        assert_eq!(c.registry_addr.to_string(), DEFAULT_REGISTRY_ADDR);
        assert_eq!(c.builder_state_dir, PathBuf::from("/tmp/from-flag/builder"));
        assert_eq!(c.demo.generator.signal_strength, 1.5);
        assert_eq!(c.demo.generator.n_persons, 2000);
        assert_eq!(c.demo.covariates.concept_ids, c.demo.generator.concept_ids());
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(serde_yaml::from_str::<FileConfig>("unknown_key: 1").is_err());
        let bad = |o: Overrides| StackConfig::resolve(FileConfig::default(), &o).unwrap_err();
        assert!(matches!(
            bad(Overrides { port_range: Some("9-1".into()), ..Default::default() }),
            ConfigError::Invalid { field: "port_range", .. }
        ));
        assert!(matches!(
            bad(Overrides { registry_addr: Some("nowhere".into()), ..Default::default() }),
            ConfigError::Invalid { field: "registry_addr", .. }
        ));
    }

    #[test]
    fn wildcard_address_is_reached_over_loopback() {
        let o = Overrides { registry_addr: Some("0.0.0.0:7000".into()), ..Default::default() };
        let c = StackConfig::resolve(FileConfig::default(), &o).unwrap();
        assert_eq!(c.registry_url(), "http://127.0.0.1:7000");
    }
}
