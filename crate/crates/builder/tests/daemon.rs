mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use common::*;
use dpm_builder::daemon::{ENDPOINT_TAG, ERROR_TAG, STATUS_TAG};
use dpm_builder::*;
use dpm_core::lightsaber::MODEL_ARTIFACT;
use dpm_registry::{Registry, Stage};

fn start(api: &Arc<LocalApi>, state: &Path, first_port: u16) -> Builder {
    Builder::start(test_config("local", state, first_port), api.clone(), Arc::new(InProcessLauncher)).unwrap()
}

fn tag(reg: &Registry, name: &str, version: u64, key: &str) -> Option<String> {
    reg.get_version(name, version).unwrap().tags.get(key).cloned()
}

fn ready(reg: &Registry, name: &str, version: u64) -> bool {
    tag(reg, name, version, STATUS_TAG).as_deref() == Some("READY")
}

/// Every job's journal history follows the state machine one edge at a time.
fn assert_legal_history(state: &Path, max_attempts: u32) {
    let mut last: BTreeMap<String, JobState> = BTreeMap::new();
    for snap in JobStore::history(state).unwrap() {
        assert!(snap.attempts <= max_attempts, "{} made {} attempts", snap.job_id, snap.attempts);
        match last.insert(snap.job_id.clone(), snap.state) {
            None => assert_eq!(snap.state, JobState::Pending, "{} did not start PENDING", snap.job_id),
            Some(prev) => assert!(
                prev == snap.state || prev.can_move_to(snap.state),
                "{}: {prev} -> {}",
                snap.job_id,
                snap.state
            ),
        }
    }
}

#[test]
fn promotion_is_deployed_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Arc::new(Registry::open(dir.path().join("reg")).unwrap());
    let (run_id, _) = trained_run(&reg, 1);
    reg.register_model(&run_id, "toy", MODEL_ARTIFACT).unwrap();
    let api = LocalApi::new(reg.clone());
    let state = dir.path().join("builder");
    let builder = start(&api, &state, 5700);

    reg.transition_stage("toy", 1, Stage::Staging).unwrap();
    reg.transition_stage("toy", 1, Stage::Production).unwrap();
    assert!(wait_until(Duration::from_secs(20), || ready(&reg, "toy", 1)));
    let endpoint = tag(&reg, "toy", 1, ENDPOINT_TAG).unwrap();
    assert!(ping_ok(&endpoint));

    let jobs = builder.jobs();
    assert_eq!(jobs.len(), 1, "staging must not build");
    assert_eq!(jobs[0].state, JobState::Ready);
    assert_eq!(jobs[0].endpoint.as_deref(), Some(endpoint.as_str()));
    assert!(wait_until(Duration::from_secs(5), || builder.jobs()[0].reported == Some(JobState::Ready)));
    assert!(wait_until(Duration::from_secs(5), || builder.cursor() == reg.last_event_id()));
    builder.shutdown(true);
    assert!(!ping_ok(&endpoint));
    assert_legal_history(&state, 4);
}

#[test]
fn redelivery_and_restart_do_not_duplicate_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Arc::new(Registry::open(dir.path().join("reg")).unwrap());
    let (run_id, _) = trained_run(&reg, 2);
    for _ in 0..3 {
        reg.register_model(&run_id, "toy", MODEL_ARTIFACT).unwrap();
    }
    let api = LocalApi::new(reg.clone());
    api.redeliver_every.store(2, Ordering::SeqCst);
    let state = dir.path().join("builder");
    let builder = start(&api, &state, 5720);
    for v in 1..=3 {
        reg.transition_stage("toy", v, Stage::Production).unwrap();
        assert!(wait_until(Duration::from_secs(20), || ready(&reg, "toy", v)), "v{v}");
    }
    assert_eq!(builder.jobs().len(), 3);
    builder.shutdown(false);

    // Restart with the cursor rewound to the beginning.
    fs::write(state.join("cursor"), "0\n").unwrap();
    let builder = start(&api, &state, 5720);
    assert!(wait_until(Duration::from_secs(10), || builder.cursor() == reg.last_event_id()));
    std::thread::sleep(Duration::from_millis(200));
    let jobs = builder.jobs();
    assert_eq!(jobs.len(), 3);
    assert!(jobs.iter().all(|j| j.state == JobState::Ready));
    let live = builder.deployments();
    assert_eq!(live.len(), 1);
    assert_eq!(live[0].version, 3);
    assert!(ping_ok(&live[0].endpoint));

    // Promoting an archived version again is a new promotion.
    reg.transition_stage("toy", 1, Stage::Production).unwrap();
    assert!(wait_until(Duration::from_secs(20), || {
        builder.jobs().len() == 4 && builder.deployments().first().map(|d| d.version) == Some(1)
    }));
    assert!(wait_until(Duration::from_secs(10), || builder.jobs().iter().all(|j| j.state == JobState::Ready)));
    builder.shutdown(true);
    assert_legal_history(&state, 4);
}

#[test]
fn permanent_packaging_failure_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Arc::new(Registry::open(dir.path().join("reg")).unwrap());
    let (run_id, _) = trained_run(&reg, 3);
    let v = reg.register_model(&run_id, "toy", MODEL_ARTIFACT).unwrap();
    fs::remove_file(reg.artifact_path(&v.artifact_sha256)).unwrap();
    let api = LocalApi::new(reg.clone());
    let state = dir.path().join("builder");
    let builder = start(&api, &state, 5740);
    reg.transition_stage("toy", 1, Stage::Production).unwrap();

    assert!(wait_until(Duration::from_secs(10), || {
        tag(&reg, "toy", 1, STATUS_TAG).as_deref() == Some("FAILED")
    }));
    assert!(tag(&reg, "toy", 1, ENDPOINT_TAG).is_none());
    assert!(!tag(&reg, "toy", 1, ERROR_TAG).unwrap().is_empty());
    let job = &builder.jobs()[0];
    assert_eq!(job.state, JobState::Failed);
    assert_eq!(job.attempts, 1);
    assert!(job.last_error.as_deref().is_some_and(|e| !e.is_empty()));
    assert!(builder.deployments().is_empty());
    builder.shutdown(true);
    assert_legal_history(&state, 1);
}

#[test]
fn deploy_failures_are_retried_then_failed() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Arc::new(Registry::open(dir.path().join("reg")).unwrap());
    let (run_id, _) = trained_run(&reg, 4);
    reg.register_model(&run_id, "toy", MODEL_ARTIFACT).unwrap();
    let api = LocalApi::new(reg.clone());
    let state = dir.path().join("builder");
    let mut config = test_config("local", &state, 5760);
    // A single port that is already taken: every launch fails.
    let blocker = std::net::TcpListener::bind("127.0.0.1:5760").unwrap();
    config.ports = 5760..=5760;
    config.max_retries = 2;
    let builder = Builder::start(config, api.clone(), Arc::new(InProcessLauncher)).unwrap();
    reg.transition_stage("toy", 1, Stage::Production).unwrap();

    assert!(wait_until(Duration::from_secs(20), || {
        tag(&reg, "toy", 1, STATUS_TAG).as_deref() == Some("FAILED")
    }));
    let job = &builder.jobs()[0];
    assert_eq!(job.attempts, 3);
    assert!(job.last_error.is_some());
    builder.shutdown(true);
    drop(blocker);
    assert_legal_history(&state, 3);
}

#[test]
fn registry_outages_delay_but_do_not_lose_work() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Arc::new(Registry::open(dir.path().join("reg")).unwrap());
    let (run_id, _) = trained_run(&reg, 5);
    reg.register_model(&run_id, "toy", MODEL_ARTIFACT).unwrap();
    reg.register_model(&run_id, "toy", MODEL_ARTIFACT).unwrap();
    let api = LocalApi::new(reg.clone());
    let state = dir.path().join("builder");
    let builder = start(&api, &state, 5780);

    // Tag writes fail: the deployment proceeds, the report waits.
    api.tags_down.store(true, Ordering::SeqCst);
    reg.transition_stage("toy", 1, Stage::Production).unwrap();
    assert!(wait_until(Duration::from_secs(20), || builder.jobs().first().map(|j| j.state) == Some(JobState::Ready)));
    std::thread::sleep(Duration::from_millis(300));
    assert!(tag(&reg, "toy", 1, STATUS_TAG).is_none());
    assert!(builder.pending_callbacks() > 0);
    api.tags_down.store(false, Ordering::SeqCst);
    assert!(wait_until(Duration::from_secs(10), || ready(&reg, "toy", 1)));

    // The whole registry is unreachable while a promotion happens.
    api.down.store(true, Ordering::SeqCst);
    reg.transition_stage("toy", 2, Stage::Production).unwrap();
    std::thread::sleep(Duration::from_millis(500));
    assert_eq!(builder.jobs().len(), 1);
    api.down.store(false, Ordering::SeqCst);
    assert!(wait_until(Duration::from_secs(20), || ready(&reg, "toy", 2)));
    assert_eq!(builder.deployments()[0].version, 2);
    builder.shutdown(true);
    assert_legal_history(&state, 4);
}

#[test]
fn unreported_terminal_states_are_resent_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Arc::new(Registry::open(dir.path().join("reg")).unwrap());
    let (run_id, _) = trained_run(&reg, 6);
    reg.register_model(&run_id, "toy", MODEL_ARTIFACT).unwrap();
    let api = LocalApi::new(reg.clone());
    let state = dir.path().join("builder");
    let builder = start(&api, &state, 5800);
    api.tags_down.store(true, Ordering::SeqCst);
    reg.transition_stage("toy", 1, Stage::Production).unwrap();
    assert!(wait_until(Duration::from_secs(20), || builder.jobs().first().map(|j| j.state) == Some(JobState::Ready)));
    builder.shutdown(false);
    assert!(tag(&reg, "toy", 1, STATUS_TAG).is_none());

    api.tags_down.store(false, Ordering::SeqCst);
    let builder = start(&api, &state, 5800);
    assert!(wait_until(Duration::from_secs(10), || ready(&reg, "toy", 1)));
    let endpoint = tag(&reg, "toy", 1, ENDPOINT_TAG).unwrap();
    assert_eq!(builder.deployments()[0].endpoint, endpoint);
    assert!(ping_ok(&endpoint));
    assert!(wait_until(Duration::from_secs(5), || builder.jobs()[0].reported == Some(JobState::Ready)));
    builder.shutdown(true);
}

#[test]
fn same_name_jobs_run_in_event_order() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Arc::new(Registry::open(dir.path().join("reg")).unwrap());
    let (run_id, _) = trained_run(&reg, 7);
    for _ in 0..4 {
        reg.register_model(&run_id, "toy", MODEL_ARTIFACT).unwrap();
    }
    for v in 1..=4 {
        reg.transition_stage("toy", v, Stage::Production).unwrap();
    }
    let api = LocalApi::new(reg.clone());
    let state = dir.path().join("builder");
    let builder = start(&api, &state, 5820);
    assert!(wait_until(Duration::from_secs(40), || {
        let jobs = builder.jobs();
        jobs.len() == 4 && jobs.iter().all(|j| j.state == JobState::Ready)
    }));
    assert_eq!(builder.deployments()[0].version, 4);

    // Each job starts building only after the previous one reached READY.
    let history = JobStore::history(&state).unwrap();
    let position = |version: u64, s: JobState| {
        history
            .iter()
            .position(|j| j.version == version && j.state == s)
            .unwrap()
    };
    for v in 2..=4 {
        assert!(position(v - 1, JobState::Ready) < position(v, JobState::Building), "v{v} overlapped v{}", v - 1);
    }
    builder.shutdown(true);
    assert_legal_history(&state, 4);
}
