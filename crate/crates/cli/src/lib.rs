//! The `dpm` command.

pub mod config;
pub mod demo;
pub mod ops;
pub mod stack;

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use dpm_builder::{BuilderConfig, ProcessLauncher};
use dpm_registry::RegistryClient;
use serde_json::json;

use crate::config::{Overrides, StackConfig};
use crate::stack::StackError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dpm", version, about = "Run the model lifecycle stack locally and drive the benchmark demo")]
pub struct Cli {
    /// YAML config file (default: ./dpm360.yaml when present).
    #[arg(long, global = true, env = "DPM_CONFIG", value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[arg(long, global = true, env = "DPM_DATA_DIR", value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "DPM_REGISTRY_ADDR", value_name = "HOST:PORT")]
    pub registry_addr: Option<String>,
    #[arg(long, global = true, env = "DPM_BUILDER_STATE_DIR", value_name = "DIR")]
    pub builder_state_dir: Option<PathBuf>,
    /// Ports for model servers, as LO-HI.
    #[arg(long, global = true, env = "DPM_PORT_RANGE", value_name = "LO-HI")]
    pub port_range: Option<String>,
    /// Static files served by the registry under /ui.
    #[arg(long, global = true, env = "DPM_UI_DIR", value_name = "DIR")]
    pub ui_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start the registry and builder in the background.
    Up {
        /// Clear runtime state left by a stack that did not shut down.
        #[arg(long)]
        reset: bool,
        #[arg(long, default_value_t = 60, value_name = "SECS")]
        timeout: u64,
    },
    /// Stop the stack; data is kept.
    Down {
        #[arg(long, default_value_t = 60, value_name = "SECS")]
        timeout: u64,
    },
    /// Generate data, build the cohort and features, train and register both models.
    Demo {
        #[arg(long, env = "DPM_SIGNAL_STRENGTH")]
        signal_strength: Option<f64>,
        #[arg(long, env = "DPM_N_PERSONS")]
        n_persons: Option<usize>,
        /// Seed of the synthetic data.
        #[arg(long, env = "DPM_SEED")]
        seed: Option<u64>,
    },
    /// Move a model version to Production, which triggers a deployment.
    Promote {
        name: String,
        version: u64,
        /// Wait up to SECS for the deployment to become READY or FAILED.
        #[arg(long, value_name = "SECS")]
        wait: Option<u64>,
    },
    /// Show models, stages, deployments and build jobs.
    Status,
    /// Send an input file to the model's deployed endpoint.
    Predict { name: String, input: PathBuf },
    #[command(hide = true)]
    Supervise {
        #[arg(long)]
        run_dir: PathBuf,
    },
    #[command(hide = true)]
    RegistryServer {
        #[arg(long)]
        addr: SocketAddr,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    #[command(hide = true)]
    BuilderDaemon {
        #[arg(long)]
        registry_url: String,
        #[arg(long)]
        state_dir: PathBuf,
        #[arg(long)]
        ports: String,
    },
    #[command(hide = true)]
    ServeModel {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        addr: SocketAddr,
    },
}

/// Error with the exit code it maps to.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(e: impl std::fmt::Display) -> Self {
        Self { code: EXIT_USAGE, message: e.to_string() }
    }

    fn stage(e: impl std::fmt::Display) -> Self {
        Self { code: EXIT_FAILURE, message: e.to_string() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self { code: EXIT_FAILURE, message: format!("{e:#}") }
    }
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let service = matches!(
        cli.command,
        Command::Supervise { .. } | Command::RegistryServer { .. } | Command::BuilderDaemon { .. } | Command::ServeModel { .. }
    );
    if !service {
        // Exit quietly when stdout is closed early, e.g. piped into `head`.
        // SAFETY: restores the default disposition before any threads start.
        unsafe {
            libc::signal(libc::SIGPIPE, libc::SIG_DFL);
        }
    }
    let json = cli.json;
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            if json {
                println!("{}", json!({ "ok": false, "exit_code": f.code, "error": f.message }));
            }
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn init_tracing(default: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let overrides = Overrides {
        data_dir: cli.data_dir.clone(),
        registry_addr: cli.registry_addr.clone(),
        builder_state_dir: cli.builder_state_dir.clone(),
        port_range: cli.port_range.clone(),
        ui_dir: cli.ui_dir.clone(),
    };
    let load = || StackConfig::load(cli.config.as_deref(), &overrides).map_err(Failure::usage);
    let json = cli.json;
    match cli.command {
        Command::Up { reset, timeout } => {
            init_tracing("warn");
            let config = load()?;
            let state = stack::up(&config, reset, Duration::from_secs(timeout)).map_err(Failure::stage)?;
            if json {
                print_json(&json!({ "ok": true, "stack": state, "data_dir": config.data_dir }));
            } else {
                println!("stack up: registry {} (pid {}), builder pid {}, data in {}",
                    state.registry_url,
                    state.registry_pid.map_or("-".into(), |p| p.to_string()),
                    state.builder_pid.map_or("-".into(), |p| p.to_string()),
                    config.data_dir.display());
                if config.ui_dir.is_some() {
                    println!("dashboard: {}/ui/", state.registry_url);
                }
            }
            Ok(())
        }
        Command::Down { timeout } => {
            init_tracing("warn");
            let config = load()?;
            match stack::down(&config, Duration::from_secs(timeout)) {
                Ok(state) => {
                    if json {
                        print_json(&json!({ "ok": true, "stopped": state }));
                    } else {
                        println!("stack down (supervisor pid {}); data kept in {}", state.supervisor_pid, config.data_dir.display());
                    }
                    Ok(())
                }
                Err(StackError::NotRunning) => {
                    if json {
                        print_json(&json!({ "ok": true, "stopped": null }));
                    } else {
                        println!("stack is not running");
                    }
                    Ok(())
                }
                Err(e) => Err(Failure::stage(e)),
            }
        }
        Command::Demo { signal_strength, n_persons, seed } => {
            init_tracing("warn");
            let mut config = load()?;
            let generator = &mut config.demo.generator;
            if let Some(s) = signal_strength {
                generator.signal_strength = s;
            }
            if let Some(n) = n_persons {
                generator.n_persons = n;
            }
            if let Some(s) = seed {
                generator.seed = s;
            }
            let client = RegistryClient::new(&config.registry_url());
            let mut progress = |line: &str| {
                if !json {
                    println!("{line}");
                }
            };
            let report = demo::run_demo(&config, &client, &mut progress).map_err(Failure::stage)?;
            if json {
                print_json(&json!({ "ok": report.all_finished(), "report": report }));
            } else {
                print!("\n{}", demo::render(&report));
            }
            if report.all_finished() {
                Ok(())
            } else {
                Err(Failure::stage("not every training run finished"))
            }
        }
        Command::Promote { name, version, wait } => {
            init_tracing("warn");
            let config = load()?;
            let client = RegistryClient::new(&config.registry_url());
            let v = ops::promote(&client, &name, version, wait.map(Duration::from_secs)).map_err(Failure::stage)?;
            if json {
                print_json(&json!({ "ok": true, "version": v }));
            } else {
                println!("{name} v{version} is in {}", v.stage);
                for (k, val) in v.tags.iter().filter(|(k, _)| k.starts_with("deployment.")) {
                    println!("  {k} = {val}");
                }
            }
            Ok(())
        }
        Command::Status => {
            init_tracing("warn");
            let config = load()?;
            let client = RegistryClient::new(&config.registry_url());
            let report = ops::status(&config, &client)?;
            if json {
                print_json(&report);
            } else {
                print!("{}", ops::render_status(&report));
            }
            Ok(())
        }
        Command::Predict { name, input } => {
            init_tracing("warn");
            let config = load()?;
            let client = RegistryClient::new(&config.registry_url());
            let p = ops::predict(&client, &name, &input).map_err(Failure::stage)?;
            if json {
                print_json(&p);
            } else if let Some(prob) = p.response["probability"].as_f64() {
                println!("{prob}");
            } else if let Some(probs) = p.response["probabilities"].as_array() {
                for prob in probs {
                    println!("{prob}");
                }
            } else {
                println!("{}", p.response);
            }
            Ok(())
        }
        Command::Supervise { run_dir } => {
            init_tracing("info");
            stack::supervise(&run_dir)?;
            Ok(())
        }
        Command::RegistryServer { addr, data_dir, ui_dir } => {
            init_tracing("info");
            let rt = tokio::runtime::Runtime::new().map_err(Failure::stage)?;
            rt.block_on(dpm_registry::server::run(dpm_registry::server::ServerConfig { addr, data_dir, ui_dir }))?;
            Ok(())
        }
        Command::BuilderDaemon { registry_url, state_dir, ports } => {
            init_tracing("info");
            let mut config = BuilderConfig::new(&registry_url, &state_dir);
            config.ports = dpm_builder::parse_port_range(&ports).map_err(Failure::usage)?;
            let launcher = ProcessLauncher {
                program: std::env::current_exe().map_err(Failure::stage)?,
                args: vec!["serve-model".into()],
                log_dir: Some(state_dir.join("logs")),
            };
            dpm_builder::run_daemon(config, Arc::new(launcher))?;
            Ok(())
        }
        Command::ServeModel { bundle, addr } => {
            init_tracing("info");
            let rt = tokio::runtime::Runtime::new().map_err(Failure::stage)?;
            rt.block_on(dpm_builder::serving::run(bundle, addr))?;
            Ok(())
        }
    }
}
