//! `up`/`down` and the supervisor process that keeps the registry and builder running.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom};
use std::net::TcpListener;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use dpm_registry::RegistryClient;
use serde::{Deserialize, Serialize};

use crate::config::StackConfig;

pub const STATE_FILE: &str = "stack.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, thiserror::Error)]
pub enum StackError {
    #[error("AlreadyRunning: the stack is already running (supervisor pid {pid}, registry {registry_url})")]
    AlreadyRunning { pid: u32, registry_url: String },
    #[error("PortInUse: port {port} is already in use")]
    PortInUse { port: u16 },
    #[error("StaleState: {} holds state of a stack that is no longer running; rerun with --reset", .0.display())]
    StaleState(PathBuf),
    #[error("NotRunning: the stack is not running")]
    NotRunning,
    #[error("StartupFailed: {0}")]
    StartupFailed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Written by the supervisor; the presence of the file means a stack owns the data dir.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackState {
    pub supervisor_pid: u32,
    pub registry_pid: Option<u32>,
    pub builder_pid: Option<u32>,
    pub registry_url: String,
    pub registry_restarts: u32,
    pub builder_restarts: u32,
}

pub fn read_state(run_dir: &Path) -> io::Result<Option<StackState>> {
    match fs::read(run_dir.join(STATE_FILE)) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value).expect("serializable"))?;
    fs::rename(tmp, path)
}

/// Whether `pid` exists and is not a zombie.
pub fn pid_alive(pid: u32) -> bool {
    // SAFETY: signal 0 only checks for existence.
    if unsafe { libc::kill(pid as libc::pid_t, 0) } != 0 {
        return false;
    }
    match fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => stat
            .rsplit_once(") ")
            .and_then(|(_, rest)| rest.chars().next())
            .is_some_and(|state| state != 'Z'),
        Err(_) => true,
    }
}

fn signal(pid: u32, sig: libc::c_int) {
    // SAFETY: kill(2) on a pid this stack recorded.
    unsafe {
        libc::kill(pid as libc::pid_t, sig);
    }
}

fn wait_gone(pid: u32, timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if !pid_alive(pid) {
            return true;
        }
        thread::sleep(Duration::from_millis(50));
    }
    !pid_alive(pid)
}

/// The running stack, or `None` when nothing owns the data dir.
pub fn running(config: &StackConfig) -> io::Result<Option<StackState>> {
    Ok(read_state(&config.run_dir())?.filter(|s| pid_alive(s.supervisor_pid)))
}

/// Starts the supervisor and waits for both services.
pub fn up(config: &StackConfig, reset: bool, timeout: Duration) -> Result<StackState, StackError> {
    let run_dir = config.run_dir();
    if let Some(state) = read_state(&run_dir)? {
        if pid_alive(state.supervisor_pid) {
            return Err(StackError::AlreadyRunning {
                pid: state.supervisor_pid,
                registry_url: state.registry_url,
            });
        }
        if !reset {
            return Err(StackError::StaleState(run_dir.join(STATE_FILE)));
        }
        for pid in [state.builder_pid, state.registry_pid].into_iter().flatten() {
            if pid_alive(pid) {
                signal(pid, libc::SIGTERM);
                if !wait_gone(pid, Duration::from_secs(10)) {
                    signal(pid, libc::SIGKILL);
                }
            }
        }
        fs::remove_file(run_dir.join(STATE_FILE))?;
    }
    let port = config.registry_addr.port();
    if TcpListener::bind(config.registry_addr).is_err() {
        return Err(StackError::PortInUse { port });
    }

    for dir in [&run_dir, &config.log_dir(), &config.registry_dir(), &config.builder_state_dir] {
        fs::create_dir_all(dir)?;
    }
    write_json(&run_dir.join(CONFIG_FILE), config)?;
    let log_path = config.log_dir().join("supervisor.log");
    let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
    let log_start = log.metadata()?.len();
    let mut child = detached(
        Command::new(std::env::current_exe()?)
            .arg("supervise")
            .arg("--run-dir")
            .arg(&run_dir),
        log,
    )?;

    let client = RegistryClient::new(&config.registry_url());
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(status) = child.try_wait()? {
            return Err(StackError::StartupFailed(format!(
                "supervisor exited with {status}: {}",
                log_tail(&log_path, log_start)
            )));
        }
        if let Some(state) = read_state(&run_dir)? {
            if state.supervisor_pid == child.id() && state.builder_pid.is_some() && client.health().is_ok() {
                return Ok(state);
            }
        }
        if Instant::now() >= deadline {
            signal(child.id(), libc::SIGTERM);
            let _ = child.wait();
            return Err(StackError::StartupFailed(format!(
                "services not ready after {timeout:?}: {}",
                log_tail(&log_path, log_start)
            )));
        }
        thread::sleep(Duration::from_millis(100));
    }
}

/// Stops the supervisor, which stops the builder (and its model servers) then the registry.
pub fn down(config: &StackConfig, timeout: Duration) -> Result<StackState, StackError> {
    let run_dir = config.run_dir();
    let Some(state) = read_state(&run_dir)? else {
        return Err(StackError::NotRunning);
    };
    if pid_alive(state.supervisor_pid) {
        signal(state.supervisor_pid, libc::SIGTERM);
        if !wait_gone(state.supervisor_pid, timeout) {
            signal(state.supervisor_pid, libc::SIGKILL);
        }
    }
    // A supervisor that stopped cleanly removed the state file; otherwise its services may
    // still be running.
    let Some(state) = read_state(&run_dir)? else {
        return Ok(state);
    };
    for pid in [state.builder_pid, state.registry_pid].into_iter().flatten() {
        if pid_alive(pid) {
            signal(pid, libc::SIGTERM);
            if !wait_gone(pid, Duration::from_secs(10)) {
                signal(pid, libc::SIGKILL);
            }
        }
    }
    let _ = fs::remove_file(run_dir.join(STATE_FILE));
    Ok(state)
}

fn detached(cmd: &mut Command, log: File) -> io::Result<Child> {
    let err = log.try_clone()?;
    // SAFETY: setsid is async-signal-safe and touches no memory of the parent.
    unsafe {
        cmd.pre_exec(|| {
            libc::setsid();
            Ok(())
        });
    }
    cmd.stdin(Stdio::null()).stdout(log).stderr(err).spawn()
}

fn log_tail(path: &Path, from: u64) -> String {
    let mut text = String::new();
    if let Ok(mut f) = File::open(path) {
        let _ = f.seek(SeekFrom::Start(from));
        let _ = f.read_to_string(&mut text);
    }
    let lines: Vec<&str> = text.lines().rev().take(8).collect();
    if lines.is_empty() {
        return "no output".into();
    }
    lines.into_iter().rev().collect::<Vec<_>>().join("\n")
}

static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn on_stop(_: libc::c_int) {
    STOP.store(true, Ordering::SeqCst);
}

struct Service {
    name: &'static str,
    args: Vec<String>,
    log: PathBuf,
    child: Option<Child>,
    started: Instant,
    restarts: u32,
    backoff: Duration,
    next_start: Instant,
}

impl Service {
    fn new(name: &'static str, args: Vec<String>, log: PathBuf) -> Self {
        Self {
            name,
            args,
            log,
            child: None,
            started: Instant::now(),
            restarts: 0,
            backoff: Duration::from_millis(500),
            next_start: Instant::now(),
        }
    }

    fn pid(&self) -> Option<u32> {
        self.child.as_ref().map(Child::id)
    }

    fn start(&mut self) -> io::Result<()> {
        let log = OpenOptions::new().create(true).append(true).open(&self.log)?;
        let err = log.try_clone()?;
        let child = Command::new(std::env::current_exe()?)
            .args(&self.args)
            .stdin(Stdio::null())
            .stdout(log)
            .stderr(err)
            .spawn()?;
        tracing::info!(service = self.name, pid = child.id(), "started");
        self.child = Some(child);
        self.started = Instant::now();
        Ok(())
    }

    /// Reaps an exited child and schedules its restart. Returns whether it had exited.
    fn reap(&mut self) -> bool {
        let Some(child) = self.child.as_mut() else { return false };
        match child.try_wait() {
            Ok(Some(status)) => {
                if self.started.elapsed() > Duration::from_secs(30) {
                    self.backoff = Duration::from_millis(500);
                }
                tracing::warn!(service = self.name, %status, restart_in = ?self.backoff, "exited unexpectedly");
                self.child = None;
                self.restarts += 1;
                self.next_start = Instant::now() + self.backoff;
                self.backoff = (self.backoff * 2).min(Duration::from_secs(10));
                true
            }
            _ => false,
        }
    }

    fn stop(&mut self, timeout: Duration) {
        let Some(mut child) = self.child.take() else { return };
        signal(child.id(), libc::SIGTERM);
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if let Ok(Some(_)) = child.try_wait() {
                tracing::info!(service = self.name, "stopped");
                return;
            }
            thread::sleep(Duration::from_millis(50));
        }
        tracing::warn!(service = self.name, "did not stop in time; killing");
        let _ = child.kill();
        let _ = child.wait();
    }
}

/// Body of the hidden `supervise` command: runs until SIGTERM or SIGINT.
pub fn supervise(run_dir: &Path) -> anyhow::Result<()> {
    let config: StackConfig = serde_json::from_slice(&fs::read(run_dir.join(CONFIG_FILE))?)?;
    // SAFETY: the handler only stores to an atomic.
    let handler = on_stop as extern "C" fn(libc::c_int) as libc::sighandler_t;
    unsafe {
        libc::signal(libc::SIGTERM, handler);
        libc::signal(libc::SIGINT, handler);
    }
    let logs = config.log_dir();
    let mut registry_args = vec![
        "registry-server".to_string(),
        "--addr".into(),
        config.registry_addr.to_string(),
        "--data-dir".into(),
        config.registry_dir().display().to_string(),
    ];
    if let Some(ui) = &config.ui_dir {
        registry_args.extend(["--ui-dir".into(), ui.display().to_string()]);
    }
    let mut registry = Service::new("registry", registry_args, logs.join("registry.log"));
    let mut builder = Service::new(
        "builder",
        vec![
            "builder-daemon".into(),
            "--registry-url".into(),
            config.registry_url(),
            "--state-dir".into(),
            config.builder_state_dir.display().to_string(),
            "--ports".into(),
            format!("{}-{}", config.ports.start(), config.ports.end()),
        ],
        logs.join("builder.log"),
    );
    let client = RegistryClient::new(&config.registry_url());
    let mut state = StackState {
        supervisor_pid: std::process::id(),
        registry_pid: None,
        builder_pid: None,
        registry_url: config.registry_url(),
        registry_restarts: 0,
        builder_restarts: 0,
    };
    let state_path = run_dir.join(STATE_FILE);
    write_json(&state_path, &state)?;

    let mut registry_ready = false;
    while !STOP.load(Ordering::SeqCst) {
        if registry.reap() {
            registry_ready = false;
        }
        builder.reap();
        let now = Instant::now();
        if registry.child.is_none() && now >= registry.next_start {
            registry.start()?;
        }
        if registry.child.is_some() && !registry_ready {
            registry_ready = client.health().is_ok();
        }
        // The builder needs a reachable registry for its first poll only; later outages
        // are retried by the builder itself.
        if builder.child.is_none() && now >= builder.next_start && (registry_ready || builder.restarts > 0) {
            builder.start()?;
        }
        let next = StackState {
            registry_pid: registry.pid(),
            builder_pid: builder.pid(),
            registry_restarts: registry.restarts,
            builder_restarts: builder.restarts,
            ..state.clone()
        };
        if next != state {
            state = next;
            write_json(&state_path, &state)?;
        }
        thread::sleep(Duration::from_millis(100));
    }

    tracing::info!("stopping stack");
    builder.stop(Duration::from_secs(30));
    registry.stop(Duration::from_secs(10));
    fs::remove_file(&state_path)?;
    Ok(())
}
