use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::thread;

use dpm_core::lightsaber::*;
use dpm_registry::server::serve;
use dpm_registry::*;
use dpm_testkit::toy_bundle;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Server {
    addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl Server {
    fn start(dir: &Path) -> Self {
        let registry = Arc::new(Registry::open(dir).unwrap());
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let (tx, rx) = std::sync::mpsc::channel();
        let thread = thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(listener.local_addr().unwrap()).unwrap();
                serve(listener, registry, None, async {
                    let _ = stopped.await;
                })
                .await
                .unwrap();
            });
        });
        let addr = rx.recv().unwrap();
        Self { addr, stop: Some(stop), thread: Some(thread) }
    }

    fn client(&self) -> RegistryClient {
        RegistryClient::new(&format!("http://{}", self.addr))
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.stop.take().unwrap().send(());
        let _ = self.thread.take().unwrap().join();
    }
}

fn status(e: ClientError) -> (u16, String) {
    match e {
        ClientError::Api { status, code, .. } => (status, code),
        other => panic!("expected an API error, got {other}"),
    }
}

#[test]
fn errors_map_to_http_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path());
    let c = server.client();
    assert_eq!(c.health().unwrap()["status"], "ok");

    assert_eq!(status(c.get_run("missing").unwrap_err()), (404, "UnknownRun".into()));
    let run = c.create_run("exp").unwrap();
    c.log_param(&run.run_id, "k", "a").unwrap();
    c.log_param(&run.run_id, "k", "a").unwrap();
    assert_eq!(status(c.log_param(&run.run_id, "k", "b").unwrap_err()), (409, "ParamConflict".into()));
    c.log_metric(&run.run_id, "m", 2, 1.0).unwrap();
    assert_eq!(status(c.log_metric(&run.run_id, "m", 1, 1.0).unwrap_err()).0, 409);
    assert_eq!(status(c.register_model(&run.run_id, "m", "model.dpm").unwrap_err()), (409, "RunNotFinished".into()));
    assert_eq!(status(c.log_param(&run.run_id, "big", &"x".repeat(5000)).unwrap_err()).0, 400);
    assert_eq!(status(c.get_model("nothing").unwrap_err()), (404, "UnknownModel".into()));
    assert_eq!(status(c.fetch_artifact(&"a".repeat(64)).unwrap_err()).0, 404);

    let raw = ureq::post(&format!("http://{}/api/v1/runs", server.addr)).send_string("{nope");
    match raw {
        Err(ureq::Error::Status(400, r)) => {
            let body: serde_json::Value = r.into_json().unwrap();
            assert_eq!(body["code"], "InvalidRequest");
            assert!(body["message"].is_string());
        }
        other => panic!("unexpected {other:?}"),
    }
    c.log_artifact(&run.run_id, "model.dpm", b"bytes").unwrap();
    c.finish_run(&run.run_id, RunStatus::Finished).unwrap();
    c.register_model(&run.run_id, "m", "model.dpm").unwrap();
    let bad_stage = ureq::post(&format!("http://{}/api/v1/models/m/versions/1/stage", server.addr))
        .send_json(serde_json::json!({ "stage": "Live" }));
    assert!(matches!(bad_stage, Err(ureq::Error::Status(400, _))));
}

#[test]
fn tracked_training_run_registers_and_promotes_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path());
    let mut client = server.client();

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bundle = toy_bundle(&mut rng, 200, 3, 2, |s, t| s[0] + t[1] > 0.0);
    let splits = DatasetSplits::new(&bundle.labels, &SplitOptions::default()).unwrap();
    let config = TrainerConfig { max_epochs: 5, ..Default::default() };
    let spec = ModelSpec::Linear { l2: 0.01 };
    let (model, report) = train(
        &spec,
        &bundle,
        &splits,
        &config,
        Some(Tracking { tracker: &mut client, experiment: "toy".into() }),
    )
    .unwrap();

    let runs = client.list_runs(Some("toy")).unwrap();
    assert_eq!(runs.len(), 1);
    let run = &runs[0];
    assert_eq!(run.status, RunStatus::Finished);
    assert_eq!(run.params["model.kind"], "linear");
    assert_eq!(run.final_metrics()["test_auroc"], report.auroc.unwrap());
    assert!(!run.metrics["train_loss"].is_empty());

    let artifact = run.artifact(MODEL_ARTIFACT).unwrap();
    let bytes = client.fetch_artifact(&artifact.sha256).unwrap();
    assert_eq!(sha256_hex(&bytes), artifact.sha256);
    assert_eq!(bytes, model.to_bytes());

    let v1 = client.register_model(&run.run_id, "toy-model", MODEL_ARTIFACT).unwrap();
    let v2 = client.register_model(&run.run_id, "toy-model", MODEL_ARTIFACT).unwrap();
    assert_eq!((v1.version, v2.version), (1, 2));
    client.transition_stage("toy-model", 1, Stage::Production).unwrap();
    let after = client.poll_events(0, 1000).unwrap().last().unwrap().event_id;
    client.transition_stage("toy-model", 2, Stage::Production).unwrap();
    client.transition_stage("toy-model", 2, Stage::Production).unwrap();
    let events = client.poll_events(after, 1000).unwrap();
    assert_eq!(events.len(), 2);
    assert_eq!(events[0].promotion(), Some(("toy-model".into(), 2)));
    let model_view = client.get_model("toy-model").unwrap();
    let stages: Vec<Stage> = model_view.versions.iter().map(|v| v.stage).collect();
    assert_eq!(stages, vec![Stage::Archived, Stage::Production]);

    client.set_version_tag("toy-model", 2, "deployment.status", "READY").unwrap();
    assert_eq!(client.get_version("toy-model", 2).unwrap().tags["deployment.status"], "READY");
    assert_eq!(client.list_models().unwrap().len(), 1);
}

#[test]
fn names_needing_escapes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path());
    let c = server.client();
    let run = c.create_run("exp one").unwrap();
    c.log_artifact(&run.run_id, "weights v1.bin", b"w").unwrap();
    c.finish_run(&run.run_id, RunStatus::Finished).unwrap();
    let v = c.register_model(&run.run_id, "mortality model?#", "weights v1.bin").unwrap();
    assert_eq!(v.model_name, "mortality model?#");
    assert_eq!(c.get_version("mortality model?#", 1).unwrap().artifact_name, "weights v1.bin");
    assert_eq!(c.list_runs(Some("exp one")).unwrap().len(), 1);
}

#[test]
fn server_restart_keeps_acknowledged_writes() {
    let dir = tempfile::tempdir().unwrap();
    let (run_id, events) = {
        let server = Server::start(dir.path());
        let c = server.client();
        let run = c.create_run("exp").unwrap();
        for step in 0..20 {
            c.log_metric(&run.run_id, "loss", step, 1.0 / (step as f64 + 3.0)).unwrap();
        }
        c.log_artifact(&run.run_id, "model.dpm", b"weights").unwrap();
        c.finish_run(&run.run_id, RunStatus::Finished).unwrap();
        c.register_model(&run.run_id, "m", "model.dpm").unwrap();
        c.transition_stage("m", 1, Stage::Production).unwrap();
        (run.run_id, c.poll_events(0, 1000).unwrap())
    };
    let server = Server::start(dir.path());
    let c = server.client();
    let run = c.get_run(&run_id).unwrap();
    assert_eq!(run.metrics["loss"].len(), 20);
    assert_eq!(run.metrics["loss"][7].value, 0.1);
    assert_eq!(c.poll_events(0, 1000).unwrap(), events);
    assert_eq!(c.get_version("m", 1).unwrap().stage, Stage::Production);
}

#[test]
fn concurrent_clients_lose_no_metric_points() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path());
    let handles: Vec<_> = (0..100)
        .map(|i| {
            let c = server.client();
            thread::spawn(move || {
                let run = c.create_run("load").unwrap();
                for step in 0..10 {
                    c.log_metric(&run.run_id, "m", step, (i * 10 + step) as f64).unwrap();
                }
                run.run_id
            })
        })
        .collect();
    let ids: Vec<String> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let c = server.client();
    let total: usize = ids.iter().map(|id| c.get_run(id).unwrap().metrics["m"].len()).sum();
    assert_eq!(total, 1000);
    assert_eq!(c.list_runs(Some("load")).unwrap().len(), 100);
}

#[test]
fn event_polling_respects_limits() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path());
    let c = server.client();
    for _ in 0..5 {
        let run = c.create_run("e").unwrap();
        c.finish_run(&run.run_id, RunStatus::Failed).unwrap();
    }
    assert_eq!(c.poll_events(0, 2).unwrap().len(), 2);
    assert_eq!(c.poll_events(3, 100).unwrap().len(), 2);
    assert!(c.poll_events(5, 100).unwrap().is_empty());
    let ids: Vec<u64> = c.poll_events(0, 100).unwrap().iter().map(|e| e.event_id).collect();
    assert_eq!(ids, vec![1, 2, 3, 4, 5]);
    let default_limit: Vec<serde_json::Value> =
        ureq::get(&format!("http://{}/api/v1/events", server.addr)).call().unwrap().into_json().unwrap();
    assert_eq!(default_limit.len(), 5);
}
