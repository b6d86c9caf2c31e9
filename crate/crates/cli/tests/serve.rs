use std::path::{Path, PathBuf};

use expo_cli::serve::{checkpoint_study_models, run_study_models, serve_listener, serve_on};
use expo_cli::{cmd_train, CliError};
use expo_core::engine::Predictor;
use expo_core::explain::Explainer;
use expo_core::rng::SeedStream;
use expo_core::task::{new_round, TaskSettings};
use expo_service::ServiceConfig;
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

fn trained_run(dir: &Path) -> PathBuf {
    let cfg = json!({
        "dataset": PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/housing.json"),
        "architectures": {"widths": [8], "depths": [1]},
        "regularizers": [{"kind": "expo_fidelity", "weights": [0.05]}],
        "train": {"epochs": 5},
        "explainers": [{"name": "lime", "explainer": {"kind": "local_linear", "m": 40}}],
        "seeds": [2],
        "output_dir": "run"
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    cmd_train(&path).unwrap();
    dir.join("run")
}

/// One HTTP/1.1 exchange over a fresh connection.
async fn http(addr: std::net::SocketAddr, method: &str, path: &str, body: Option<Value>) -> (u16, Value) {
    let mut stream = TcpStream::connect(addr).await.unwrap();
    let body = body.map(|b| b.to_string()).unwrap_or_default();
    let req = format!(
        "{method} {path} HTTP/1.1\r\nHost: test\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(req.as_bytes()).await.unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).await.unwrap();
    let (head, payload) = raw.split_once("\r\n\r\n").unwrap();
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    (status, serde_json::from_str(payload).unwrap_or(Value::Null))
}

async fn start(run: &Path, seed: u64) -> (std::net::SocketAddr, tokio::sync::oneshot::Sender<()>, tokio::task::JoinHandle<()>) {
    let models = run_study_models(run).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let config = ServiceConfig { seed, ..ServiceConfig::default() };
    let handle = tokio::spawn(async move {
        serve_listener(listener, models, config, async {
            let _ = rx.await;
        })
        .await
        .unwrap();
    });
    (addr, tx, handle)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn served_prices_equal_direct_engine_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained_run(dir.path());
    let (addr, tx, handle) = start(&run, 11).await;

    let (status, health) = http(addr, "GET", "/health", None).await;
    assert_eq!((status, health["status"].as_str()), (200, Some("ready")));

    let (status, created) = http(addr, "POST", "/sessions", None).await;
    assert_eq!(status, 201);
    let mut served: Vec<f64> = created["conditions"].as_array().unwrap().iter().map(|c| c["price"].as_f64().unwrap()).collect();

    // the first session's first round, rebuilt from the checkpoints directly
    let models = run_study_models(&run).unwrap();
    let seed = SeedStream::new(11).derive(&[0, 0]).value();
    let (a, b) = new_round(&models.none, &models.expo, &models.dataset, &models.explainer, &models.task, seed).unwrap();
    let ds = &models.dataset;
    let mut direct = vec![
        models.none.predict_one(&a.current_x, 0) * ds.target_std + ds.target_mean,
        models.expo.predict_one(&b.current_x, 0) * ds.target_std + ds.target_mean,
    ];
    served.sort_by(f64::total_cmp);
    direct.sort_by(f64::total_cmp);
    for (s, d) in served.iter().zip(&direct) {
        assert!((s - d).abs() <= 1e-9 * d.abs().max(1.0), "{s} vs {d}");
    }

    let (status, body) = http(addr, "GET", "/nowhere", None).await;
    assert_eq!((status, body["code"].as_str()), (404, Some("not_found")));
    tx.send(()).unwrap();
    handle.await.unwrap();
}

#[test]
fn missing_checkpoint_refuses_to_start() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained_run(dir.path());
    let manifest = expo_cli::RunManifest::load(&run).unwrap();
    let study = manifest.study.clone().unwrap();
    let dataset = manifest.dataset.clone();
    assert!(checkpoint_study_models(&run.join(&study.none), &run.join(&study.expo), &dataset, Explainer::default(), TaskSettings::default()).is_ok());

    let absent = run.join("checkpoints/absent.json");
    let err = checkpoint_study_models(&run.join(&study.none), &absent, &dataset, Explainer::default(), TaskSettings::default());
    assert!(matches!(err, Err(CliError::Missing(p)) if p == absent));
    std::fs::remove_file(run.join(&study.expo)).unwrap();
    assert!(matches!(run_study_models(&run), Err(CliError::Missing(_))));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn busy_port_is_a_startup_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained_run(dir.path());
    let taken = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = taken.local_addr().unwrap();
    let err = serve_on(addr, run_study_models(&run).unwrap(), ServiceConfig::default(), async {}).await.unwrap_err();
    assert_eq!(err.code(), "io");
}
