#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub const DPM: &str = env!("CARGO_BIN_EXE_dpm");

/// A `dpm` environment with its own data dir and ports. Dropping it runs `dpm down`.
pub struct Stack {
    pub dir: tempfile::TempDir,
    pub registry_port: u16,
    pub ports: (u16, u16),
}

impl Stack {
    /// Registry on `base`, model servers on `base + 1 ..= base + 19`.
    pub fn new(base: u16) -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
            registry_port: base,
            ports: (base + 1, base + 19),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    pub fn url(&self) -> String {
        format!("http://127.0.0.1:{}", self.registry_port)
    }

    pub fn command(&self, args: &[&str]) -> Command {
        let mut cmd = Command::new(DPM);
        cmd.args(args)
            .current_dir(self.dir.path())
            .env_remove("DPM_CONFIG")
            .env_remove("RUST_LOG")
            .env("DPM_DATA_DIR", self.data_dir())
            .env("DPM_REGISTRY_ADDR", format!("127.0.0.1:{}", self.registry_port))
            .env("DPM_PORT_RANGE", format!("{}-{}", self.ports.0, self.ports.1));
        cmd
    }

    pub fn run(&self, args: &[&str]) -> Output {
        self.command(args).output().unwrap()
    }

    /// Runs with `--json` and parses stdout.
    pub fn json(&self, args: &[&str]) -> (i32, Value) {
        let mut all = vec!["--json"];
        all.extend_from_slice(args);
        let out = self.run(&all);
        let value = serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
            panic!(
                "dpm {args:?} printed no JSON ({e}): {}\n{}",
                String::from_utf8_lossy(&out.stdout),
                String::from_utf8_lossy(&out.stderr)
            )
        });
        (out.status.code().unwrap_or(-1), value)
    }

    pub fn up(&self) {
        let out = self.run(&["up"]);
        assert_eq!(out.status.code(), Some(0), "dpm up: {}", stderr(&out));
    }

    pub fn write_file(&self, name: &str, text: &str) -> PathBuf {
        let p = self.dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }
}

impl Drop for Stack {
    fn drop(&mut self) {
        let _ = self.run(&["down"]);
    }
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A single-row predict payload with the given shape.
pub fn predict_input(n_static: usize, t: usize, c: usize, fill: f64) -> Value {
    serde_json::json!({
        "static": vec![fill; n_static],
        "temporal": vec![vec![fill; c]; t],
        "mask": vec![vec![1.0; c]; t],
    })
}

pub fn exists(p: &Path) -> bool {
    p.exists()
}
