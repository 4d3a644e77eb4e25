use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::sync::Arc;
use std::thread;

use dpm_registry::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn finished_run(reg: &Registry, bytes: &[u8]) -> String {
    let run = reg.create_run("exp").unwrap();
    reg.log_artifact(&run.run_id, "model.dpm", bytes).unwrap();
    reg.finish_run(&run.run_id, RunStatus::Finished).unwrap();
    run.run_id
}

fn productions(reg: &Registry, name: &str) -> usize {
    reg.get_model(name)
        .map(|m| m.versions.iter().filter(|v| v.stage == Stage::Production).count())
        .unwrap_or(0)
}

#[test]
fn run_mutators_follow_the_run_invariants() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    let run = reg.create_run("exp").unwrap();
    let id = run.run_id.as_str();
    assert_eq!(id.len(), 32);
    assert!(id.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)));
    assert_eq!(run.status, RunStatus::Running);

    reg.log_param(id, "lr", "0.01").unwrap();
    reg.log_param(id, "lr", "0.01").unwrap();
    assert!(matches!(reg.log_param(id, "lr", "0.02"), Err(RegistryError::ParamConflict { .. })));

    reg.log_metric(id, "loss", 1, 0.5).unwrap();
    reg.log_metric(id, "loss", 1, 0.5).unwrap();
    assert!(matches!(
        reg.log_metric(id, "loss", 1, 0.4),
        Err(RegistryError::MetricStepRegression { .. })
    ));
    assert!(matches!(
        reg.log_metric(id, "loss", 0, 0.4),
        Err(RegistryError::MetricStepRegression { .. })
    ));
    reg.log_metric(id, "loss", 3, 0.3).unwrap();
    assert!(matches!(reg.log_metric("nope", "loss", 1, 0.0), Err(RegistryError::UnknownRun(_))));

    let too_long = "x".repeat(MAX_VALUE_BYTES + 1);
    assert!(matches!(reg.log_param(id, "big", &too_long), Err(RegistryError::InvalidRequest(_))));
    reg.log_param(id, "big", &too_long[1..]).unwrap();

    reg.finish_run(id, RunStatus::Finished).unwrap();
    reg.finish_run(id, RunStatus::Finished).unwrap();
    assert!(matches!(reg.finish_run(id, RunStatus::Failed), Err(RegistryError::RunNotActive(_))));
    assert!(matches!(reg.log_param(id, "x", "1"), Err(RegistryError::RunNotActive(_))));
    assert!(matches!(reg.log_metric(id, "loss", 9, 0.1), Err(RegistryError::RunNotActive(_))));

    let run = reg.get_run(id).unwrap();
    let steps: Vec<i64> = run.metrics["loss"].iter().map(|p| p.step).collect();
    assert_eq!(steps, vec![1, 3]);
    assert_eq!(run.params.len(), 2);
    let finished: Vec<_> = reg.poll_events(0, 100).into_iter().filter(|e| e.kind == EventKind::RunFinished).collect();
    assert_eq!(finished.len(), 1);
    assert_eq!(finished[0].payload["run_id"], id);
}

#[test]
fn artifacts_are_content_addressed() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    let run = reg.create_run("exp").unwrap();
    let bytes: Vec<u8> = (0..10_000u32).map(|i| (i * 7 % 251) as u8).collect();
    let a = reg.log_artifact(&run.run_id, "a.bin", &bytes).unwrap();
    let b = reg.log_artifact(&run.run_id, "b.bin", &bytes).unwrap();
    assert_eq!(a.sha256, b.sha256);
    assert_eq!(a.size, bytes.len() as u64);
    let fetched = reg.artifact_bytes(&a.sha256).unwrap();
    assert_eq!(sha256_hex(&fetched), a.sha256);
    assert_eq!(fetched, bytes);
    assert!(matches!(reg.artifact_bytes(&"0".repeat(64)), Err(RegistryError::UnknownArtifact(_))));
    assert!(matches!(reg.artifact_bytes("../journal"), Err(RegistryError::UnknownArtifact(_))));
    assert_eq!(reg.get_run(&run.run_id).unwrap().artifacts.len(), 2);
}

#[test]
fn registration_requires_a_finished_run_and_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    let running = reg.create_run("exp").unwrap();
    assert!(matches!(
        reg.register_model(&running.run_id, "m", "model.dpm"),
        Err(RegistryError::RunNotFinished(_))
    ));
    assert!(matches!(reg.register_model("nope", "m", "model.dpm"), Err(RegistryError::UnknownRun(_))));
    let id = finished_run(&reg, b"weights");
    assert!(matches!(reg.register_model(&id, "m", "other"), Err(RegistryError::UnknownArtifact(_))));

    let v1 = reg.register_model(&id, "m", "model.dpm").unwrap();
    let v2 = reg.register_model(&id, "m", "model.dpm").unwrap();
    assert_eq!((v1.version, v2.version), (1, 2));
    assert_eq!(v1.stage, Stage::None);
    assert_eq!(v1.artifact_sha256, sha256_hex(b"weights"));
    let created: Vec<_> = reg.poll_events(0, 100).into_iter().filter(|e| e.kind == EventKind::VersionCreated).collect();
    assert_eq!(created.len(), 2);
}

#[test]
fn concurrent_registrations_get_distinct_versions() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Arc::new(Registry::open(dir.path()).unwrap());
    let id = finished_run(&reg, b"w");
    let handles: Vec<_> = (0..10)
        .map(|_| {
            let reg = reg.clone();
            let id = id.clone();
            thread::spawn(move || reg.register_model(&id, "m", "model.dpm").unwrap().version)
        })
        .collect();
    let versions: BTreeSet<u64> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(versions, (1..=10).collect());
}

#[test]
fn promotion_archives_the_previous_production_version() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    let id = finished_run(&reg, b"w");
    reg.register_model(&id, "m", "model.dpm").unwrap();
    reg.register_model(&id, "m", "model.dpm").unwrap();
    reg.transition_stage("m", 1, Stage::Production).unwrap();
    let before = reg.last_event_id();
    reg.transition_stage("m", 2, Stage::Production).unwrap();
    reg.transition_stage("m", 2, Stage::Production).unwrap();
    assert_eq!(reg.get_version("m", 1).unwrap().stage, Stage::Archived);
    assert_eq!(reg.get_version("m", 2).unwrap().stage, Stage::Production);

    let events = reg.poll_events(before, 100);
    assert_eq!(events.len(), 2);
    assert_eq!(events[0].promotion(), Some(("m".to_string(), 2)));
    assert_eq!(events[1].payload["version"], 1);
    assert_eq!(events[1].payload["to"], "Archived");
    let for_v2 = reg
        .poll_events(0, 1000)
        .iter()
        .filter(|e| e.kind == EventKind::StageChanged && e.payload["version"] == 2)
        .count();
    assert_eq!(for_v2, 1);
    assert!(matches!(reg.transition_stage("m", 9, Stage::Staging), Err(RegistryError::UnknownVersion { .. })));
}

#[test]
fn version_tags_are_last_write_wins() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    let id = finished_run(&reg, b"w");
    reg.register_model(&id, "m", "model.dpm").unwrap();
    reg.set_version_tag("m", 1, "deployment.status", "BUILDING").unwrap();
    reg.set_version_tag("m", 1, "deployment.status", "READY").unwrap();
    reg.set_version_tag("m", 1, "deployment.endpoint", "http://127.0.0.1:5300").unwrap();
    let tags = reg.get_version("m", 1).unwrap().tags;
    let expected: BTreeMap<String, String> = [
        ("deployment.endpoint", "http://127.0.0.1:5300"),
        ("deployment.status", "READY"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    assert_eq!(tags, expected);
    assert!(matches!(reg.set_version_tag("m", 2, "k", "v"), Err(RegistryError::UnknownVersion { .. })));
    let tagged = reg.poll_events(0, 100).iter().filter(|e| e.kind == EventKind::VersionTagged).count();
    assert_eq!(tagged, 3);
}

#[test]
fn polling_is_a_stable_cursor_walk() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    let id = finished_run(&reg, b"w");
    for _ in 0..5 {
        reg.register_model(&id, "m", "model.dpm").unwrap();
    }
    let all = reg.poll_events(0, 1000);
    assert_eq!(all.len(), 6);
    assert_eq!(all.iter().map(|e| e.event_id).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
    assert_eq!(reg.poll_events(2, 2), all[2..4].to_vec());
    assert_eq!(reg.poll_events(2, 2), reg.poll_events(2, 2));
    assert!(reg.poll_events(6, 10).is_empty());
    assert!(reg.poll_events(600, 10).is_empty());
}

/// A seeded mix of every mutation, including rejected ones.
fn mixed_operations(reg: &Registry, seed: u64, n: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs: Vec<String> = Vec::new();
    for i in 0..n {
        match rng.gen_range(0..8) {
            0 => runs.push(reg.create_run(&format!("e{}", rng.gen_range(0..2))).unwrap().run_id),
            _ if runs.is_empty() => runs.push(reg.create_run("e0").unwrap().run_id),
            1 => {
                let r = &runs[rng.gen_range(0..runs.len())];
                let _ = reg.log_param(r, &format!("p{}", rng.gen_range(0..3)), &rng.gen_range(0..2).to_string());
            }
            2 => {
                let r = &runs[rng.gen_range(0..runs.len())];
                let _ = reg.log_metric(r, "loss", i as i64, rng.gen());
            }
            3 => {
                let r = &runs[rng.gen_range(0..runs.len())];
                let _ = reg.log_artifact(r, "model.dpm", &[rng.gen::<u8>(); 16]);
            }
            4 => {
                let r = &runs[rng.gen_range(0..runs.len())];
                let status = if rng.gen_bool(0.8) { RunStatus::Finished } else { RunStatus::Failed };
                let _ = reg.finish_run(r, status);
            }
            5 => {
                let r = &runs[rng.gen_range(0..runs.len())];
                let _ = reg.register_model(r, &format!("m{}", rng.gen_range(0..2)), "model.dpm");
            }
            6 => {
                let stage = [Stage::None, Stage::Staging, Stage::Production, Stage::Archived][rng.gen_range(0..4)];
                let _ = reg.transition_stage(&format!("m{}", rng.gen_range(0..2)), rng.gen_range(1..4), stage);
            }
            _ => {
                let _ = reg.set_version_tag(&format!("m{}", rng.gen_range(0..2)), rng.gen_range(1..4), "k", &i.to_string());
            }
        }
    }
}

#[test]
fn restart_preserves_everything_acknowledged() {
    let dir = tempfile::tempdir().unwrap();
    let (runs, models, events) = {
        let reg = Registry::open(dir.path()).unwrap();
        mixed_operations(&reg, 3, 300);
        (reg.list_runs(None), reg.list_models(), reg.poll_events(0, usize::MAX))
    };
    assert!(events.len() > 20, "only {} events", events.len());
    let reg = Registry::open(dir.path()).unwrap();
    assert_eq!(reg.list_runs(None), runs);
    assert_eq!(reg.list_models(), models);
    assert_eq!(reg.poll_events(0, usize::MAX), events);

    // New events continue the sequence without gaps.
    let id = finished_run(&reg, b"after restart");
    let v = reg.register_model(&id, "fresh", "model.dpm").unwrap();
    assert_eq!(v.version, 1);
    let tail = reg.poll_events(events.len() as u64, 100);
    assert_eq!(tail[0].event_id, events.len() as u64 + 1);
}

#[test]
fn torn_journal_tail_is_discarded_on_open() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("journal.jsonl");
    let events = {
        let reg = Registry::open(dir.path()).unwrap();
        mixed_operations(&reg, 4, 100);
        reg.poll_events(0, usize::MAX)
    };
    let intact = fs::read(&journal).unwrap();
    OpenOptions::new()
        .append(true)
        .open(&journal)
        .unwrap()
        .write_all(br#"{"op":"transition","model_name":"m0","vers"#)
        .unwrap();

    let reg = Registry::open(dir.path()).unwrap();
    assert_eq!(reg.poll_events(0, usize::MAX), events);
    assert_eq!(fs::read(&journal).unwrap(), intact);
    let id = finished_run(&reg, b"x");
    drop(reg);
    let reg = Registry::open(dir.path()).unwrap();
    assert_eq!(reg.get_run(&id).unwrap().status, RunStatus::Finished);
}

#[test]
fn corrupt_journal_line_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    {
        let reg = Registry::open(dir.path()).unwrap();
        mixed_operations(&reg, 5, 40);
    }
    let journal = dir.path().join("journal.jsonl");
    let mut lines: Vec<String> = fs::read_to_string(&journal).unwrap().lines().map(String::from).collect();
    lines[3] = "{not json".into();
    fs::write(&journal, lines.join("\n") + "\n").unwrap();
    assert!(matches!(Registry::open(dir.path()), Err(RegistryError::JournalCorrupt { line: 4, .. })));
}

#[test]
fn event_log_matches_the_journal() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    mixed_operations(&reg, 6, 150);
    let events = reg.poll_events(0, usize::MAX);

    // Each event-producing journal record accounts for its events in order; archival on
    // promotion is recomputed from the journal's own stage history.
    let journal = fs::read_to_string(dir.path().join("journal.jsonl")).unwrap();
    let mut stages: BTreeMap<(String, u64), String> = BTreeMap::new();
    let mut expected = Vec::new();
    let mut records = 0;
    for line in journal.lines() {
        records += 1;
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        let key = |r: &serde_json::Value| (r["model_name"].as_str().unwrap_or("").to_string(), r["version"].as_u64().unwrap_or(0));
        match r["op"].as_str().unwrap() {
            "finish_run" => expected.push((EventKind::RunFinished, r["run_id"].clone())),
            "create_version" => {
                stages.insert(key(&r), "None".into());
                expected.push((EventKind::VersionCreated, r["version"].clone()));
            }
            "set_version_tag" => expected.push((EventKind::VersionTagged, r["version"].clone())),
            "transition" => {
                let (name, version) = key(&r);
                let to = r["stage"].as_str().unwrap().to_string();
                expected.push((EventKind::StageChanged, r["version"].clone()));
                let old = stages
                    .iter()
                    .find(|((n, v), st)| *n == name && *v != version && st.as_str() == "Production")
                    .map(|(k, _)| k.clone());
                stages.insert((name, version), to.clone());
                if let (Some(old), "Production") = (old, to.as_str()) {
                    expected.push((EventKind::StageChanged, old.1.into()));
                    stages.insert(old, "Archived".into());
                }
            }
            _ => {}
        }
    }
    assert!(records >= 50);
    let actual: Vec<_> = events
        .iter()
        .map(|e| {
            let key = if e.kind == EventKind::RunFinished { "run_id" } else { "version" };
            (e.kind, e.payload[key].clone())
        })
        .collect();
    assert_eq!(actual, expected);
}

#[test]
fn concurrent_runs_lose_no_metric_points() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Arc::new(Registry::open(dir.path()).unwrap());
    let handles: Vec<_> = (0..100)
        .map(|i| {
            let reg = reg.clone();
            thread::spawn(move || {
                let run = reg.create_run("load").unwrap();
                for step in 0..10 {
                    reg.log_metric(&run.run_id, "m", step, (i * 10 + step) as f64).unwrap();
                }
                run.run_id
            })
        })
        .collect();
    let ids: Vec<String> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    drop(reg);
    let reg = Registry::open(dir.path()).unwrap();
    let mut values = BTreeSet::new();
    for id in &ids {
        for p in &reg.get_run(id).unwrap().metrics["m"] {
            values.insert(p.value as i64);
        }
    }
    assert_eq!(values.len(), 1000);
}

#[test]
fn single_production_under_concurrent_transitions() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Arc::new(Registry::open_with(dir.path(), false).unwrap());
    let id = finished_run(&reg, b"w");
    for _ in 0..3 {
        reg.register_model(&id, "m", "model.dpm").unwrap();
    }
    let handles: Vec<_> = (0..8u64)
        .map(|t| {
            let reg = reg.clone();
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(t);
                for _ in 0..125 {
                    let stage = [Stage::None, Stage::Staging, Stage::Production, Stage::Archived][rng.gen_range(0..4)];
                    reg.transition_stage("m", rng.gen_range(1..=3), stage).unwrap();
                    assert!(productions(&reg, "m") <= 1);
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let final_stages: Vec<Stage> = reg.get_model("m").unwrap().versions.iter().map(|v| v.stage).collect();
    drop(reg);

    // Every committed prefix of the journal is a state with at most one Production version.
    let journal = fs::read_to_string(dir.path().join("journal.jsonl")).unwrap();
    let lines: Vec<&str> = journal.lines().collect();
    assert!(lines.len() > 300);
    let replay = tempfile::tempdir().unwrap();
    for k in (0..=lines.len()).step_by(7).chain([lines.len()]) {
        let text: String = lines[..k].iter().map(|l| format!("{l}\n")).collect();
        fs::write(replay.path().join("journal.jsonl"), text).unwrap();
        let reg = Registry::open_with(replay.path(), false).unwrap();
        assert!(productions(&reg, "m") <= 1, "prefix {k}");
        if k == lines.len() {
            let stages: Vec<Stage> = reg.get_model("m").unwrap().versions.iter().map(|v| v.stage).collect();
            assert_eq!(stages, final_stages);
        }
    }

    // The event stream alone reconstructs the same stages.
    let reg = Registry::open_with(dir.path(), false).unwrap();
    let mut stages = vec![Stage::None; 3];
    for e in reg.poll_events(0, usize::MAX) {
        if e.kind == EventKind::StageChanged {
            let v = e.payload["version"].as_u64().unwrap() as usize;
            stages[v - 1] = e.payload["to"].as_str().unwrap().parse().unwrap();
        }
    }
    assert_eq!(stages, final_stages);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_transition_walks_keep_one_production(
        steps in proptest::collection::vec((1u64..=3, 0usize..4), 1..40)
    ) {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open_with(dir.path(), false).unwrap();
        let id = finished_run(&reg, b"w");
        for _ in 0..3 {
            reg.register_model(&id, "m", "model.dpm").unwrap();
        }
        let mut model = [Stage::None; 3];
        for (v, s) in steps {
            let stage = [Stage::None, Stage::Staging, Stage::Production, Stage::Archived][s];
            let before = reg.last_event_id();
            reg.transition_stage("m", v, stage).unwrap();
            let emitted = reg.last_event_id() - before;
            let noop = model[v as usize - 1] == stage;
            let archives = stage == Stage::Production && !noop
                && model.iter().enumerate().any(|(i, &st)| st == Stage::Production && i != v as usize - 1);
            prop_assert_eq!(emitted, if noop { 0 } else if archives { 2 } else { 1 });
            if stage == Stage::Production {
                for st in model.iter_mut().filter(|st| **st == Stage::Production) {
                    *st = Stage::Archived;
                }
            }
            model[v as usize - 1] = stage;
            prop_assert!(productions(&reg, "m") <= 1);
            let actual: Vec<Stage> = reg.get_model("m").unwrap().versions.iter().map(|v| v.stage).collect();
            prop_assert_eq!(actual, model.to_vec());
        }
    }
}
