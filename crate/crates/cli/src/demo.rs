//! The end-to-end benchmark: synthetic store, cohort, features, tracked training, registration.

use std::path::PathBuf;

use dpm_core::benchmark::{self, BenchmarkError};
use dpm_core::ehr::{generate_synthetic, write_store};
use dpm_core::features::write_bundle;
use dpm_core::lightsaber::{train_detailed, EvalReport, RunStatus, Tracking, MODEL_ARTIFACT};
use dpm_registry::RegistryClient;
use serde::Serialize;

use crate::config::StackConfig;

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {source:#}")]
pub struct StageError {
    pub stage: String,
    pub source: anyhow::Error,
}

fn stage<T, E: Into<anyhow::Error>>(name: &str, r: Result<T, E>) -> Result<T, StageError> {
    r.map_err(|e| StageError {
        stage: name.to_string(),
        source: e.into(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoRun {
    pub kind: String,
    pub run_id: String,
    pub status: RunStatus,
    pub model_name: String,
    pub version: u64,
    pub best_epoch: usize,
    pub epochs: usize,
    pub test_report: EvalReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoReport {
    pub store_dir: PathBuf,
    pub manifest: PathBuf,
    pub persons: usize,
    pub cohort_size: usize,
    pub positives: usize,
    pub runs: Vec<DemoRun>,
}

impl DemoReport {
    pub fn all_finished(&self) -> bool {
        !self.runs.is_empty() && self.runs.iter().all(|r| r.status == RunStatus::Finished)
    }
}

/// Runs every stage against the registry at `client`; `progress` receives one line per stage.
pub fn run_demo(
    config: &StackConfig,
    client: &RegistryClient,
    progress: &mut dyn FnMut(&str),
) -> Result<DemoReport, StageError> {
    let demo = &config.demo;
    stage("registry", client.health())?;

    let store = stage("generate", generate_synthetic(&demo.generator))?;
    let store_dir = config.demo_dir().join("store");
    stage("generate", write_store(&store, &store_dir))?;
    progress(&format!(
        "generated {} persons, {} visits, {} measurements into {}",
        store.persons().len(),
        store.visits().len(),
        store.measurements().len(),
        store_dir.display()
    ));

    let data = benchmark::prepare(&store, &demo.cohort, &demo.outcome, &demo.covariates, &demo.split).map_err(|e| {
        let name = match e {
            BenchmarkError::Cohort(_) => "cohort",
            BenchmarkError::Feature(_) => "features",
            BenchmarkError::Split(_) => "split",
        };
        StageError {
            stage: name.into(),
            source: e.into(),
        }
    })?;
    let bundle = &data.bundle;
    let positives = bundle.labels.iter().filter(|&&l| l == 1).count();
    progress(&format!(
        "cohort of {} ({} positive), splits {}/{}/{}",
        bundle.len(),
        positives,
        data.splits.train.len(),
        data.splits.validation.len(),
        data.splits.test.len()
    ));
    let manifest = stage("features", write_bundle(bundle, config.demo_dir().join("features")))?;
    progress(&format!("features written, manifest {}", manifest.display()));

    let mut runs = Vec::new();
    for spec in &demo.models {
        let kind = spec.kind();
        let name = format!("train:{kind}");
        let mut tracker = client.clone();
        let tracking = Tracking {
            tracker: &mut tracker,
            experiment: demo.experiment.clone(),
        };
        let outcome = stage(&name, train_detailed(spec, bundle, &data.splits, &demo.trainer, Some(tracking)))?;
        let run_id = outcome.model.run_id.clone().expect("tracked runs carry their id");
        let run = stage("registry", client.get_run(&run_id))?;
        let model_name = format!("{}-{kind}", demo.model_prefix);
        let version = stage("register", client.register_model(&run_id, &model_name, MODEL_ARTIFACT))?;
        progress(&format!(
            "{kind}: run {run_id} {}, test auroc {}, registered {model_name} v{}",
            run.status,
            fmt_metric(outcome.test_report.auroc),
            version.version
        ));
        runs.push(DemoRun {
            kind: kind.to_string(),
            run_id,
            status: run.status,
            model_name,
            version: version.version,
            best_epoch: outcome.best_epoch,
            epochs: outcome.history.len(),
            test_report: outcome.test_report,
        });
    }

    Ok(DemoReport {
        store_dir,
        manifest,
        persons: store.persons().len(),
        cohort_size: bundle.len(),
        positives,
        runs,
    })
}

pub fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

/// Plain-text rendering of the test reports.
pub fn render(report: &DemoReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:<32} {:<22} {:>8} {:>8} {:>8} {:>8} {:>6}\n",
        "model", "run_id", "registered", "auroc", "auprc", "brier", "acc@0.5", "n"
    ));
    for r in &report.runs {
        let t = &r.test_report;
        out.push_str(&format!(
            "{:<10} {:<32} {:<22} {:>8} {:>8} {:>8.4} {:>8.4} {:>6}\n",
            r.kind,
            r.run_id,
            format!("{} v{}", r.model_name, r.version),
            fmt_metric(t.auroc),
            fmt_metric(t.auprc),
            t.brier,
            t.accuracy_at_0_5,
            t.n
        ));
    }
    out
}
