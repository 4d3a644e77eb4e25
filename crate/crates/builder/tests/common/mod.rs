#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use dpm_builder::*;
use dpm_core::lightsaber::*;
use dpm_registry::{ClientError, Event, ModelVersion, Registry, RegistryError};
use dpm_testkit::toy_bundle;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// In-process registry access with switchable faults.
pub struct LocalApi {
    pub reg: Arc<Registry>,
    /// All calls fail as if the registry were unreachable.
    pub down: AtomicBool,
    /// Only tag writes fail.
    pub tags_down: AtomicBool,
    /// Every n-th poll replays from event 0 (0 disables).
    pub redeliver_every: AtomicUsize,
    polls: AtomicUsize,
}

impl LocalApi {
    pub fn new(reg: Arc<Registry>) -> Arc<Self> {
        Arc::new(Self {
            reg,
            down: AtomicBool::new(false),
            tags_down: AtomicBool::new(false),
            redeliver_every: AtomicUsize::new(0),
            polls: AtomicUsize::new(0),
        })
    }

    fn check(&self) -> Result<(), ClientError> {
        if self.down.load(Ordering::SeqCst) {
            return Err(ClientError::Unreachable("connection refused".into()));
        }
        Ok(())
    }
}

fn api_error(e: RegistryError) -> ClientError {
    let status = match e.code() {
        c if c.starts_with("Unknown") => 404,
        "StorageFailure" | "JournalCorrupt" => 500,
        _ => 409,
    };
    ClientError::Api { status, code: e.code().to_string(), message: e.to_string() }
}

impl RegistryApi for LocalApi {
    fn poll_events(&self, after: u64, limit: usize) -> Result<Vec<Event>, ClientError> {
        self.check()?;
        let n = self.polls.fetch_add(1, Ordering::SeqCst) + 1;
        let every = self.redeliver_every.load(Ordering::SeqCst);
        let from = if every > 0 && n.is_multiple_of(every) { 0 } else { after };
        Ok(self.reg.poll_events(from, limit))
    }

    fn get_version(&self, name: &str, version: u64) -> Result<ModelVersion, ClientError> {
        self.check()?;
        self.reg.get_version(name, version).map_err(api_error)
    }

    fn fetch_artifact(&self, sha256: &str) -> Result<Vec<u8>, ClientError> {
        self.check()?;
        self.reg.artifact_bytes(sha256).map_err(api_error)
    }

    fn set_version_tag(&self, name: &str, version: u64, key: &str, value: &str) -> Result<(), ClientError> {
        self.check()?;
        if self.tags_down.load(Ordering::SeqCst) {
            return Err(ClientError::Unreachable("connection refused".into()));
        }
        self.reg.set_version_tag(name, version, key, value).map(drop).map_err(api_error)
    }
}

/// Trains a small tracked linear model into `reg` and returns its run id and model.
pub fn trained_run(reg: &Registry, seed: u64) -> (String, TrainedModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bundle = toy_bundle(&mut rng, 160, 3, 2, |s, t| s[0] - t[2] + 0.5 * t[5] > 0.0);
    let splits = DatasetSplits::new(&bundle.labels, &SplitOptions { seed, ..Default::default() }).unwrap();
    let config = TrainerConfig { max_epochs: 4, seed, ..Default::default() };
    let mut tracker: &Registry = reg;
    let (model, _) = train(
        &ModelSpec::Linear { l2: 0.01 },
        &bundle,
        &splits,
        &config,
        Some(Tracking { tracker: &mut tracker, experiment: "toy".into() }),
    )
    .unwrap();
    let run_id = reg.list_runs(Some("toy")).last().unwrap().run_id.clone();
    (run_id, model)
}

pub fn test_config(registry: &str, state_dir: &Path, first_port: u16) -> BuilderConfig {
    let mut config = BuilderConfig::new(registry, state_dir);
    config.ports = first_port..=first_port + 19;
    config.health_timeout = Duration::from_secs(5);
    config.drain = Duration::from_millis(200);
    config.retry_base = Duration::from_millis(50);
    config.poll_interval = Duration::from_millis(20);
    config.backoff_base = Duration::from_millis(20);
    config.backoff_cap = Duration::from_millis(200);
    config
}

pub fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    cond()
}

pub fn ping_ok(endpoint: &str) -> bool {
    ureq::AgentBuilder::new()
        .timeout(Duration::from_millis(500))
        .build()
        .get(&format!("{endpoint}/ping"))
        .call()
        .is_ok()
}
