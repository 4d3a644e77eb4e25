//! The builder daemon: watches promotions, runs build jobs, reports back to the registry.

use std::collections::{HashMap, HashSet, VecDeque};
use std::ops::RangeInclusive;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use dpm_registry::RegistryClient;

use crate::jobs::{BuildJob, JobState, JobStore};
use crate::package::{package, PackageRecipe, RegistryApi};
use crate::supervisor::{DeploymentRecord, Launcher, Supervisor, SupervisorConfig};

pub const STATUS_TAG: &str = "deployment.status";
pub const ENDPOINT_TAG: &str = "deployment.endpoint";
pub const ERROR_TAG: &str = "deployment.error";
pub const DEPLOYMENTS_FILE: &str = "deployments.json";
pub const BUNDLES_DIR: &str = "bundles";

#[derive(Debug, Clone)]
pub struct BuilderConfig {
    pub registry_url: String,
    pub state_dir: PathBuf,
    pub ports: RangeInclusive<u16>,
    pub health_timeout: Duration,
    pub drain: Duration,
    pub max_retries: u32,
    /// First retry delay; doubles per attempt.
    pub retry_base: Duration,
    pub poll_interval: Duration,
    pub backoff_base: Duration,
    pub backoff_cap: Duration,
}

impl BuilderConfig {
    pub fn new(registry_url: &str, state_dir: impl Into<PathBuf>) -> Self {
        Self {
            registry_url: registry_url.to_string(),
            state_dir: state_dir.into(),
            ports: 5300..=5399,
            health_timeout: Duration::from_secs(30),
            drain: Duration::from_millis(500),
            max_retries: 3,
            retry_base: Duration::from_secs(2),
            poll_interval: Duration::from_millis(250),
            backoff_base: Duration::from_secs(1),
            backoff_cap: Duration::from_secs(60),
        }
    }

    /// `BUILDER_REGISTRY_URL`, `BUILDER_PORT_RANGE` (`5300-5399`), `BUILDER_STATE_DIR`.
    pub fn from_env() -> Result<Self, String> {
        let url = std::env::var("BUILDER_REGISTRY_URL").unwrap_or_else(|_| "http://127.0.0.1:5180".into());
        let dir = std::env::var_os("BUILDER_STATE_DIR").map_or_else(|| PathBuf::from("builder-state"), PathBuf::from);
        let mut config = Self::new(&url, dir);
        if let Ok(range) = std::env::var("BUILDER_PORT_RANGE") {
            config.ports = parse_port_range(&range)?;
        }
        Ok(config)
    }
}

pub fn parse_port_range(s: &str) -> Result<RangeInclusive<u16>, String> {
    let err = || format!("port range {s:?} is not of the form LOW-HIGH");
    let (lo, hi) = s.trim().split_once('-').ok_or_else(err)?;
    let lo: u16 = lo.trim().parse().map_err(|_| err())?;
    let hi: u16 = hi.trim().parse().map_err(|_| err())?;
    if lo == 0 || lo > hi {
        return Err(err());
    }
    Ok(lo..=hi)
}

#[derive(Default)]
struct Stopper {
    stopped: Mutex<bool>,
    cv: Condvar,
}

impl Stopper {
    fn stop(&self) {
        *self.stopped.lock().unwrap() = true;
        self.cv.notify_all();
    }

    fn is_stopped(&self) -> bool {
        *self.stopped.lock().unwrap()
    }

    /// Sleeps unless stopped first. Returns whether the daemon is stopping.
    fn sleep(&self, d: Duration) -> bool {
        let guard = self.stopped.lock().unwrap();
        let (guard, _) = self.cv.wait_timeout_while(guard, d, |s| !*s).unwrap();
        *guard
    }
}

#[derive(Debug, Clone)]
struct Callback {
    job_id: String,
    model_name: String,
    version: u64,
    state: JobState,
    endpoint: Option<String>,
    error: Option<String>,
}

#[derive(Default)]
struct Lanes {
    queues: HashMap<String, VecDeque<String>>,
    active: HashSet<String>,
}

struct Shared {
    config: BuilderConfig,
    api: Arc<dyn RegistryApi>,
    jobs: JobStore,
    supervisor: Supervisor,
    stop: Stopper,
    lanes: Mutex<Lanes>,
    workers: Mutex<Vec<JoinHandle<()>>>,
    callbacks: Mutex<VecDeque<Callback>>,
    callback_cv: Condvar,
}

pub struct Builder {
    shared: Arc<Shared>,
    watcher: Option<JoinHandle<()>>,
    notifier: Option<JoinHandle<()>>,
}

impl Builder {
    /// Opens the state directory, restores deployments, resumes unfinished jobs and starts
    /// watching the registry.
    pub fn start(config: BuilderConfig, api: Arc<dyn RegistryApi>, launcher: Arc<dyn Launcher>) -> anyhow::Result<Self> {
        std::fs::create_dir_all(&config.state_dir)?;
        let jobs = JobStore::open(&config.state_dir)?;
        let supervisor = Supervisor::new(
            launcher,
            SupervisorConfig {
                ports: config.ports.clone(),
                health_timeout: config.health_timeout,
                drain: config.drain,
                state_file: Some(config.state_dir.join(DEPLOYMENTS_FILE)),
            },
        );
        let moved = supervisor.restore()?;
        let shared = Arc::new(Shared {
            config,
            api,
            jobs,
            supervisor,
            stop: Stopper::default(),
            lanes: Mutex::default(),
            workers: Mutex::default(),
            callbacks: Mutex::default(),
            callback_cv: Condvar::new(),
        });

        // A restored server may have moved port: its job takes the new endpoint and is
        // reported again.
        for record in moved {
            let latest = shared
                .jobs
                .jobs()
                .into_iter().rfind(|j| j.model_name == record.model_name && j.version == record.version && j.state == JobState::Ready);
            if let Some(mut job) = latest {
                job.endpoint = Some(record.endpoint.clone());
                job.reported = None;
                shared.save(&mut job);
            }
        }
        let all = shared.jobs.jobs();
        for job in &all {
            if job.state.is_terminal() && job.reported != Some(job.state) {
                shared.notify(job, job.endpoint.clone());
            }
        }
        for job in all.iter().filter(|j| !j.state.is_terminal()) {
            submit(&shared, job);
        }

        let notifier = {
            let shared = shared.clone();
            thread::Builder::new().name("builder-callbacks".into()).spawn(move || shared.run_notifier())?
        };
        let watcher = {
            let shared = shared.clone();
            thread::Builder::new().name("builder-watcher".into()).spawn(move || watch(&shared))?
        };
        Ok(Self {
            shared,
            watcher: Some(watcher),
            notifier: Some(notifier),
        })
    }

    pub fn jobs(&self) -> Vec<BuildJob> {
        self.shared.jobs.jobs()
    }

    pub fn cursor(&self) -> u64 {
        self.shared.jobs.cursor()
    }

    pub fn deployments(&self) -> Vec<DeploymentRecord> {
        self.shared.supervisor.deployments()
    }

    pub fn supervisor(&self) -> &Supervisor {
        &self.shared.supervisor
    }

    /// Number of registry callbacks not yet acknowledged.
    pub fn pending_callbacks(&self) -> usize {
        self.shared.callbacks.lock().unwrap().len()
    }

    /// Stops watching and waits for running jobs to stop. Unfinished jobs resume on the
    /// next start. With `stop_servers`, model servers are stopped too; their records are
    /// kept and relaunched on the next start.
    pub fn shutdown(mut self, stop_servers: bool) {
        self.shared.stop.stop();
        self.shared.callback_cv.notify_all();
        if let Some(w) = self.watcher.take() {
            let _ = w.join();
        }
        loop {
            let handles: Vec<_> = self.shared.workers.lock().unwrap().drain(..).collect();
            if handles.is_empty() {
                break;
            }
            for h in handles {
                let _ = h.join();
            }
        }
        if let Some(n) = self.notifier.take() {
            let _ = n.join();
        }
        if stop_servers {
            self.shared.supervisor.stop_all();
        }
    }
}

fn submit(shared: &Arc<Shared>, job: &BuildJob) {
    let mut lanes = shared.lanes.lock().unwrap();
    lanes
        .queues
        .entry(job.model_name.clone())
        .or_default()
        .push_back(job.job_id.clone());
    if !lanes.active.insert(job.model_name.clone()) {
        return;
    }
    let name = job.model_name.clone();
    let worker = {
        let shared = shared.clone();
        thread::Builder::new()
            .name(format!("builder-{name}"))
            .spawn(move || loop {
                let next = {
                    let mut lanes = shared.lanes.lock().unwrap();
                    let next = if shared.stop.is_stopped() {
                        None
                    } else {
                        lanes.queues.get_mut(&name).and_then(VecDeque::pop_front)
                    };
                    if next.is_none() {
                        lanes.active.remove(&name);
                        lanes.queues.remove(&name);
                    }
                    next
                };
                match next {
                    Some(job_id) => shared.run_job(&job_id),
                    None => return,
                }
            })
            .expect("spawn worker thread")
    };
    shared.workers.lock().unwrap().push(worker);
}

fn watch(shared: &Arc<Shared>) {
    let config = &shared.config;
    let mut backoff = config.backoff_base;
    'outer: while !shared.stop.is_stopped() {
        let events = match shared.api.poll_events(shared.jobs.cursor(), 100) {
            Ok(events) => events,
            Err(e) => {
                tracing::warn!(error = %e, retry_in = ?backoff, "registry poll failed");
                if shared.stop.sleep(backoff) {
                    break;
                }
                backoff = (backoff * 2).min(config.backoff_cap);
                continue;
            }
        };
        backoff = config.backoff_base;
        if events.is_empty() {
            shared.stop.sleep(config.poll_interval);
            continue;
        }
        for event in events {
            if let Some((name, version)) = event.promotion() {
                let job = BuildJob::new(&name, version, event.event_id);
                match shared.jobs.insert_if_new(&job) {
                    Ok(true) => {
                        tracing::info!(job = %job.job_id, "build job enqueued");
                        submit(shared, &job);
                    }
                    Ok(false) => tracing::debug!(job = %job.job_id, "duplicate promotion ignored"),
                    Err(e) => {
                        tracing::error!(error = %e, "could not record build job");
                        shared.stop.sleep(config.backoff_base);
                        continue 'outer;
                    }
                }
            }
            if event.event_id > shared.jobs.cursor() {
                if let Err(e) = shared.jobs.set_cursor(event.event_id) {
                    tracing::error!(error = %e, "could not persist cursor");
                    shared.stop.sleep(config.backoff_base);
                    continue 'outer;
                }
            }
        }
    }
}

impl Shared {
    fn save(&self, job: &mut BuildJob) {
        if let Err(e) = self.jobs.update(job) {
            // The journal is the source of truth for dedup; failing to write it is fatal.
            panic!("job journal write failed: {e}");
        }
    }

    fn transition(&self, job: &mut BuildJob, state: JobState) {
        job.state = state;
        self.save(job);
        self.notify(job, job.endpoint.clone());
    }

    fn run_job(&self, job_id: &str) {
        let Some(mut job) = self.jobs.get(job_id) else { return };
        if job.state.is_terminal() {
            return;
        }
        let max_attempts = self.config.max_retries + 1;
        if job.attempts >= max_attempts {
            job.last_error.get_or_insert_with(|| "interrupted during its last attempt".into());
            self.transition(&mut job, JobState::Failed);
            return;
        }
        if job.state == JobState::Pending {
            self.transition(&mut job, JobState::Building);
        }
        let bundles = self.config.state_dir.join(BUNDLES_DIR);
        let mut recipe: Option<PackageRecipe> = None;
        loop {
            if self.stop.is_stopped() {
                return;
            }
            job.attempts += 1;
            self.save(&mut job);
            let result = (|| -> Result<DeploymentRecord, (String, bool)> {
                if recipe.is_none() {
                    let r = package(&*self.api, &job.model_name, job.version, &bundles)
                        .map_err(|e| (e.to_string(), e.is_transient()))?;
                    recipe = Some(r);
                }
                if job.state == JobState::Building {
                    self.transition(&mut job, JobState::Deploying);
                }
                self.supervisor
                    .deploy(recipe.as_ref().unwrap())
                    .map_err(|e| (e.to_string(), true))
            })();
            match result {
                Ok(record) => {
                    job.endpoint = Some(record.endpoint);
                    job.last_error = None;
                    self.transition(&mut job, JobState::Ready);
                    tracing::info!(job = %job.job_id, endpoint = ?job.endpoint, "deployment ready");
                    return;
                }
                Err((message, transient)) => {
                    tracing::warn!(job = %job.job_id, attempt = job.attempts, error = %message, "build attempt failed");
                    job.last_error = Some(message);
                    if !transient || job.attempts >= max_attempts {
                        self.transition(&mut job, JobState::Failed);
                        return;
                    }
                    self.save(&mut job);
                    let delay = self.config.retry_base * 2u32.saturating_pow(job.attempts - 1);
                    if self.stop.sleep(delay) {
                        return;
                    }
                }
            }
        }
    }

    fn notify(&self, job: &BuildJob, endpoint: Option<String>) {
        if job.state == JobState::Pending {
            return;
        }
        self.callbacks.lock().unwrap().push_back(Callback {
            job_id: job.job_id.clone(),
            model_name: job.model_name.clone(),
            version: job.version,
            state: job.state,
            endpoint: endpoint.filter(|_| job.state == JobState::Ready),
            error: job.last_error.clone().filter(|_| job.state == JobState::Failed),
        });
        self.callback_cv.notify_all();
    }

    fn deliver(&self, cb: &Callback) -> Result<(), dpm_registry::ClientError> {
        let api = &self.api;
        if let Some(endpoint) = &cb.endpoint {
            api.set_version_tag(&cb.model_name, cb.version, ENDPOINT_TAG, endpoint)?;
        }
        if let Some(error) = &cb.error {
            let error: String = error.chars().take(1024).collect();
            api.set_version_tag(&cb.model_name, cb.version, ERROR_TAG, &error)?;
        }
        api.set_version_tag(&cb.model_name, cb.version, STATUS_TAG, cb.state.as_str())
    }

    /// Delivers callbacks in order, retrying each until the registry acknowledges it. A
    /// status superseded by a later one for the same job is skipped.
    fn run_notifier(&self) {
        let mut backoff = self.config.backoff_base;
        loop {
            let cb = {
                let mut queue = self.callbacks.lock().unwrap();
                loop {
                    if let Some(cb) = queue.front().cloned() {
                        let superseded = queue.iter().skip(1).any(|c| c.job_id == cb.job_id);
                        if superseded && !cb.state.is_terminal() {
                            queue.pop_front();
                            continue;
                        }
                        break cb;
                    }
                    if self.stop.is_stopped() {
                        return;
                    }
                    queue = self.callback_cv.wait_timeout(queue, Duration::from_millis(200)).unwrap().0;
                }
            };
            match self.deliver(&cb) {
                Ok(()) => {
                    backoff = self.config.backoff_base;
                    self.callbacks.lock().unwrap().pop_front();
                    if cb.state.is_terminal() {
                        if let Some(mut job) = self.jobs.get(&cb.job_id) {
                            if job.state == cb.state && job.reported != Some(cb.state) {
                                job.reported = Some(cb.state);
                                self.save(&mut job);
                            }
                        }
                    }
                }
                Err(e) if e.is_transient() => {
                    if self.stop.is_stopped() {
                        // Unacknowledged terminal states are resent on the next start.
                        return;
                    }
                    tracing::warn!(error = %e, retry_in = ?backoff, "registry callback failed");
                    self.stop.sleep(backoff);
                    backoff = (backoff * 2).min(self.config.backoff_cap);
                }
                Err(e) => {
                    tracing::error!(job = %cb.job_id, error = %e, "registry rejected callback");
                    self.callbacks.lock().unwrap().pop_front();
                }
            }
        }
    }
}

/// Runs the daemon against the configured registry until ctrl-c or SIGTERM.
pub fn run_daemon(config: BuilderConfig, launcher: Arc<dyn Launcher>) -> anyhow::Result<()> {
    let api: Arc<dyn RegistryApi> = Arc::new(RegistryClient::new(&config.registry_url));
    tracing::info!(registry = %config.registry_url, state_dir = %config.state_dir.display(), ports = ?config.ports, "builder starting");
    let builder = Builder::start(config, api, launcher)?;
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(dpm_registry::server::shutdown_signal());
    tracing::info!("builder stopping");
    builder.shutdown(true);
    Ok(())
}
