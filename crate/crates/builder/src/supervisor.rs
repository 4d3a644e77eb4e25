//! Local process supervisor standing in for the target cluster.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::io;
use std::net::TcpListener as StdListener;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use dpm_core::time::{serde_ts, Timestamp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::package::PackageRecipe;
use crate::serving;

/// A running model server.
pub trait ServerHandle: Send {
    fn pid(&self) -> Option<u32>;
    /// `Some(reason)` once the server has exited.
    fn exited(&mut self) -> Option<String>;
    fn stop(&mut self);
}

pub trait Launcher: Send + Sync {
    fn launch(&self, bundle: &Path, port: u16) -> io::Result<Box<dyn ServerHandle>>;
}

/// Runs each model server as a child process: `program args.. --bundle DIR --addr HOST:PORT`.
pub struct ProcessLauncher {
    pub program: PathBuf,
    pub args: Vec<OsString>,
    pub log_dir: Option<PathBuf>,
}

struct ChildHandle {
    child: Child,
}

impl ServerHandle for ChildHandle {
    fn pid(&self) -> Option<u32> {
        Some(self.child.id())
    }

    fn exited(&mut self) -> Option<String> {
        match self.child.try_wait() {
            Ok(Some(status)) => Some(format!("model server exited with {status}")),
            Ok(None) => None,
            Err(e) => Some(e.to_string()),
        }
    }

    fn stop(&mut self) {
        terminate(self.child.id());
        let deadline = Instant::now() + Duration::from_secs(5);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(20));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn terminate(pid: u32) {
    // SAFETY: kill(2) with a pid we launched or recorded.
    unsafe {
        libc::kill(pid as libc::pid_t, libc::SIGTERM);
    }
}

fn pid_alive(pid: u32) -> bool {
    // SAFETY: signal 0 only checks for existence.
    unsafe { libc::kill(pid as libc::pid_t, 0) == 0 }
}

/// Whether `pid` is still a server for `bundle`, not a reused pid.
fn serves_bundle(pid: u32, bundle: &Path) -> bool {
    let Ok(cmdline) = fs::read(format!("/proc/{pid}/cmdline")) else { return false };
    let bundle = bundle.as_os_str().as_encoded_bytes();
    cmdline.split(|&b| b == 0).any(|arg| arg == bundle)
}

/// A server left running by an earlier builder process.
struct AdoptedHandle {
    pid: u32,
}

impl ServerHandle for AdoptedHandle {
    fn pid(&self) -> Option<u32> {
        Some(self.pid)
    }

    fn exited(&mut self) -> Option<String> {
        (!pid_alive(self.pid)).then(|| "adopted model server is gone".to_string())
    }

    fn stop(&mut self) {
        terminate(self.pid);
        let deadline = Instant::now() + Duration::from_secs(5);
        while pid_alive(self.pid) && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(20));
        }
        if pid_alive(self.pid) {
            // SAFETY: as above.
            unsafe {
                libc::kill(self.pid as libc::pid_t, libc::SIGKILL);
            }
        }
    }
}

impl Launcher for ProcessLauncher {
    fn launch(&self, bundle: &Path, port: u16) -> io::Result<Box<dyn ServerHandle>> {
        let stderr = match &self.log_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Stdio::from(
                    fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(dir.join(format!("model-server-{port}.log")))?,
                )
            }
            None => Stdio::null(),
        };
        let child = Command::new(&self.program)
            .args(&self.args)
            .arg("--bundle")
            .arg(bundle)
            .arg("--addr")
            .arg(format!("127.0.0.1:{port}"))
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(stderr)
            .spawn()?;
        Ok(Box::new(ChildHandle { child }))
    }
}

/// Runs model servers on threads of the current process.
#[derive(Default)]
pub struct InProcessLauncher;

struct ThreadHandle {
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<io::Result<()>>>,
}

impl ServerHandle for ThreadHandle {
    fn pid(&self) -> Option<u32> {
        None
    }

    fn exited(&mut self) -> Option<String> {
        match &self.thread {
            Some(t) if !t.is_finished() => None,
            _ => Some("model server thread ended".into()),
        }
    }

    fn stop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Launcher for InProcessLauncher {
    fn launch(&self, bundle: &Path, port: u16) -> io::Result<Box<dyn ServerHandle>> {
        let listener = StdListener::bind(("127.0.0.1", port))?;
        listener.set_nonblocking(true)?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let bundle = bundle.to_path_buf();
        let thread = thread::Builder::new()
            .name(format!("model-server-{port}"))
            .spawn(move || {
                let rt = tokio::runtime::Builder::new_multi_thread()
                    .worker_threads(2)
                    .enable_all()
                    .build()?;
                rt.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(listener)?;
                    serving::serve_bundle(listener, bundle, async {
                        let _ = rx.await;
                    })
                    .await
                })
            })?;
        Ok(Box::new(ThreadHandle {
            stop: Some(tx),
            thread: Some(thread),
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Health {
    Starting,
    Healthy,
    Unhealthy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentRecord {
    pub model_name: String,
    pub version: u64,
    pub artifact_sha256: String,
    pub bundle_dir: PathBuf,
    pub endpoint: String,
    pub port: u16,
    pub pid: Option<u32>,
    #[serde(with = "serde_ts")]
    pub started_at: Timestamp,
    pub health: Health,
}

#[derive(Debug, Error)]
pub enum DeployError {
    #[error("no free port in {0}")]
    NoFreePort(String),
    #[error("health check of {endpoint} timed out after {waited:?}: {last}")]
    HealthCheckTimeout {
        endpoint: String,
        waited: Duration,
        last: String,
    },
    #[error("could not launch model server: {0}")]
    Launch(io::Error),
}

#[derive(Debug, Clone)]
pub struct SupervisorConfig {
    pub ports: RangeInclusive<u16>,
    pub health_timeout: Duration,
    /// How long a replaced server keeps serving after its successor is healthy.
    pub drain: Duration,
    pub state_file: Option<PathBuf>,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self {
            ports: 5300..=5399,
            health_timeout: Duration::from_secs(30),
            drain: Duration::from_millis(500),
            state_file: None,
        }
    }
}

struct Live {
    record: DeploymentRecord,
    handle: Box<dyn ServerHandle>,
}

#[derive(Default)]
struct Slots {
    live: BTreeMap<String, Live>,
    reserved: BTreeSet<u16>,
    /// Server pids not covered by a record: launched and not yet healthy, or replaced and
    /// not yet stopped. Persisted so a crashed builder's leftovers can be stopped.
    strays: BTreeMap<u32, PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct Stray {
    pid: u32,
    bundle_dir: PathBuf,
}

pub struct Supervisor {
    launcher: Arc<dyn Launcher>,
    config: SupervisorConfig,
    slots: Mutex<Slots>,
    /// Serializes writes of the state file.
    persist: Mutex<()>,
}

fn ping_agent() -> ureq::Agent {
    ureq::AgentBuilder::new()
        .timeout_connect(Duration::from_millis(500))
        .timeout(Duration::from_secs(2))
        .build()
}

/// `Ok` when `/ping` answers 200 for exactly this model version.
pub fn check_ping(endpoint: &str, name: &str, version: u64, sha256: &str) -> Result<(), String> {
    let body: serde_json::Value = match ping_agent().get(&format!("{endpoint}/ping")).call() {
        Ok(r) => r.into_json().map_err(|e| e.to_string())?,
        Err(ureq::Error::Status(code, r)) => {
            return Err(format!("/ping returned {code}: {}", r.into_string().unwrap_or_default()))
        }
        Err(e) => return Err(e.to_string()),
    };
    if body["model_name"] == name && body["version"] == version && body["artifact_sha256"] == sha256 {
        Ok(())
    } else {
        Err(format!("/ping answered for a different model: {body}"))
    }
}

fn port_free(port: u16) -> bool {
    StdListener::bind(("127.0.0.1", port)).is_ok()
}

impl Supervisor {
    pub fn new(launcher: Arc<dyn Launcher>, config: SupervisorConfig) -> Self {
        Self {
            launcher,
            config,
            slots: Mutex::new(Slots::default()),
            persist: Mutex::new(()),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Slots> {
        self.slots.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn config(&self) -> &SupervisorConfig {
        &self.config
    }

    fn strays_file(&self) -> Option<PathBuf> {
        self.config.state_file.as_ref().map(|p| p.with_extension("strays.json"))
    }

    fn set_stray(&self, pid: Option<u32>, bundle: Option<&Path>) {
        let Some(pid) = pid else { return };
        let strays: Vec<Stray> = {
            let mut slots = self.lock();
            match bundle {
                Some(b) => slots.strays.insert(pid, b.to_path_buf()),
                None => slots.strays.remove(&pid),
            };
            slots.strays.iter().map(|(&pid, b)| Stray { pid, bundle_dir: b.clone() }).collect()
        };
        let Some(path) = self.strays_file() else { return };
        let _guard = self.persist.lock().unwrap_or_else(|e| e.into_inner());
        let tmp = path.with_extension("tmp");
        let write = || -> io::Result<()> {
            fs::write(&tmp, serde_json::to_vec(&strays)?)?;
            fs::rename(&tmp, &path)
        };
        if let Err(e) = write() {
            tracing::error!(error = %e, "could not persist stray servers");
        }
    }

    /// Stops servers an earlier builder process launched or replaced without recording.
    fn stop_strays(&self, records: &[DeploymentRecord]) -> io::Result<()> {
        let Some(path) = self.strays_file() else { return Ok(()) };
        let strays: Vec<Stray> = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_default(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        for s in strays {
            if records.iter().any(|r| r.pid == Some(s.pid)) || !serves_bundle(s.pid, &s.bundle_dir) {
                continue;
            }
            tracing::info!(pid = s.pid, "stopping model server left by an earlier builder");
            AdoptedHandle { pid: s.pid }.stop();
        }
        match fs::remove_file(&path) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }

    /// Reads persisted deployments from the state file.
    pub fn load_records(path: &Path) -> io::Result<Vec<DeploymentRecord>> {
        match fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e),
        }
    }

    fn save(&self) {
        let Some(path) = &self.config.state_file else { return };
        let _guard = self.persist.lock().unwrap_or_else(|e| e.into_inner());
        let records = self.deployments();
        let tmp = path.with_extension("tmp");
        let write = || -> io::Result<()> {
            fs::write(&tmp, serde_json::to_vec_pretty(&records)?)?;
            fs::File::open(&tmp)?.sync_all()?;
            fs::rename(&tmp, path)
        };
        if let Err(e) = write() {
            tracing::error!(error = %e, "could not persist deployments");
        }
    }

    /// Brings back the deployments of an earlier builder process: servers still answering
    /// for the same model are adopted, the rest are relaunched from their bundles.
    /// Returns records whose endpoint changed.
    pub fn restore(&self) -> io::Result<Vec<DeploymentRecord>> {
        let Some(path) = self.config.state_file.clone() else { return Ok(Vec::new()) };
        let mut changed = Vec::new();
        let records = Self::load_records(&path)?;
        self.stop_strays(&records)?;
        let mut relaunched = Vec::new();
        for old in records {
            let adoptable = old.pid.is_some_and(pid_alive)
                && check_ping(&old.endpoint, &old.model_name, old.version, &old.artifact_sha256).is_ok();
            if adoptable {
                let mut slots = self.lock();
                slots.reserved.insert(old.port);
                let record = DeploymentRecord { health: Health::Healthy, ..old.clone() };
                slots.live.insert(
                    old.model_name.clone(),
                    Live { record, handle: Box::new(AdoptedHandle { pid: old.pid.unwrap() }) },
                );
                tracing::info!(model = %old.model_name, version = old.version, "adopted running model server");
                continue;
            }
            if let Some(pid) = old.pid.filter(|&p| pid_alive(p)) {
                AdoptedHandle { pid }.stop();
            }
            match self.launch_healthy(&old.model_name, old.version, &old.artifact_sha256, &old.bundle_dir, Some(old.port)) {
                Ok((record, handle)) => {
                    if record.endpoint != old.endpoint {
                        changed.push(record.clone());
                    }
                    relaunched.push(record.pid);
                    self.lock().live.insert(old.model_name.clone(), Live { record, handle });
                }
                Err(e) => tracing::error!(model = %old.model_name, error = %e, "could not restore deployment"),
            }
        }
        self.save();
        for pid in relaunched {
            self.set_stray(pid, None);
        }
        Ok(changed)
    }

    fn reserve_port(&self, preferred: Option<u16>, skip: &BTreeSet<u16>) -> Result<u16, DeployError> {
        let mut slots = self.lock();
        let candidates = preferred.into_iter().chain(self.config.ports.clone());
        for port in candidates {
            if slots.reserved.contains(&port) || skip.contains(&port) || !self.config.ports.contains(&port) {
                continue;
            }
            if port_free(port) {
                slots.reserved.insert(port);
                return Ok(port);
            }
        }
        Err(DeployError::NoFreePort(format!(
            "{}-{}",
            self.config.ports.start(),
            self.config.ports.end()
        )))
    }

    fn release_port(&self, port: u16) {
        self.lock().reserved.remove(&port);
    }

    /// Launches a server and waits for it to report healthy. A server that dies before
    /// answering (typically a lost race for its port) is retried on another port.
    fn launch_healthy(
        &self,
        name: &str,
        version: u64,
        sha256: &str,
        bundle: &Path,
        preferred: Option<u16>,
    ) -> Result<(DeploymentRecord, Box<dyn ServerHandle>), DeployError> {
        let mut tried = BTreeSet::new();
        let started = Instant::now();
        loop {
            let port = self.reserve_port(if tried.is_empty() { preferred } else { None }, &tried)?;
            tried.insert(port);
            let endpoint = format!("http://127.0.0.1:{port}");
            let mut handle = match self.launcher.launch(bundle, port) {
                Ok(h) => h,
                Err(e) if e.kind() == io::ErrorKind::AddrInUse && tried.len() < 8 => {
                    self.release_port(port);
                    continue;
                }
                Err(e) => {
                    self.release_port(port);
                    return Err(DeployError::Launch(e));
                }
            };
            self.set_stray(handle.pid(), Some(bundle));
            let mut last = String::from("not polled");
            let outcome = loop {
                match check_ping(&endpoint, name, version, sha256) {
                    Ok(()) => break Ok(()),
                    Err(e) => last = e,
                }
                if let Some(reason) = handle.exited() {
                    break Err(Some(reason));
                }
                if started.elapsed() >= self.config.health_timeout {
                    break Err(None);
                }
                thread::sleep(Duration::from_millis(50));
            };
            match outcome {
                Ok(()) => {
                    let record = DeploymentRecord {
                        model_name: name.to_string(),
                        version,
                        artifact_sha256: sha256.to_string(),
                        bundle_dir: bundle.to_path_buf(),
                        endpoint,
                        port,
                        pid: handle.pid(),
                        started_at: dpm_core::time::from_unix(chrono::Utc::now().timestamp()),
                        health: Health::Healthy,
                    };
                    return Ok((record, handle));
                }
                Err(exit) => {
                    handle.stop();
                    self.set_stray(handle.pid(), None);
                    self.release_port(port);
                    match exit {
                        Some(reason) if tried.len() < 8 && started.elapsed() < self.config.health_timeout => {
                            tracing::warn!(port, %reason, "model server exited before becoming healthy; trying another port");
                        }
                        Some(reason) => {
                            return Err(DeployError::HealthCheckTimeout { endpoint, waited: started.elapsed(), last: reason })
                        }
                        None => {
                            return Err(DeployError::HealthCheckTimeout { endpoint, waited: started.elapsed(), last })
                        }
                    }
                }
            }
        }
    }

    /// Starts the recipe's bundle and, once it is healthy, retires the previous
    /// deployment of the same model. On failure the previous deployment keeps serving.
    pub fn deploy(&self, recipe: &PackageRecipe) -> Result<DeploymentRecord, DeployError> {
        let c = &recipe.config;
        let (record, handle) =
            self.launch_healthy(&c.model_name, c.version, &c.artifact_sha256, &recipe.bundle_dir, None)?;
        let previous = self
            .lock()
            .live
            .insert(c.model_name.clone(), Live { record: record.clone(), handle });
        if let Some(old) = &previous {
            self.set_stray(old.record.pid, Some(&old.record.bundle_dir));
        }
        self.save();
        self.set_stray(record.pid, None);
        if let Some(mut old) = previous {
            thread::sleep(self.config.drain);
            old.handle.stop();
            self.set_stray(old.record.pid, None);
            self.release_port(old.record.port);
            tracing::info!(model = %c.model_name, from = old.record.version, to = c.version, "replaced deployment");
        }
        Ok(record)
    }

    pub fn deployment(&self, name: &str) -> Option<DeploymentRecord> {
        self.lock().live.get(name).map(|l| l.record.clone())
    }

    pub fn deployments(&self) -> Vec<DeploymentRecord> {
        self.lock().live.values().map(|l| l.record.clone()).collect()
    }

    /// Re-checks every live server.
    pub fn refresh_health(&self) {
        let mut slots = self.lock();
        for live in slots.live.values_mut() {
            let r = &live.record;
            live.record.health = if live.handle.exited().is_none()
                && check_ping(&r.endpoint, &r.model_name, r.version, &r.artifact_sha256).is_ok()
            {
                Health::Healthy
            } else {
                Health::Unhealthy
            };
        }
    }

    /// Stops every server, keeping the records so [`Supervisor::restore`] can relaunch them.
    pub fn stop_all(&self) {
        let mut slots = self.lock();
        for live in slots.live.values_mut() {
            live.handle.stop();
        }
    }
}
