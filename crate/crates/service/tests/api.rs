use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use expo_core::data::{DatasetManifest, StandardizedDataset};
use expo_core::engine::{MlpModel, OutputKind, Predictor};
use expo_core::explain::{Explainer, ExplainerConfig};
use expo_core::task::{Condition, TaskSettings};
use expo_service::{router, ServiceConfig, StudyModels, StudyService};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn housing() -> StandardizedDataset {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    DatasetManifest::from_file(dir.join("housing.json")).unwrap().load().unwrap()
}

fn models() -> StudyModels {
    let ds = housing();
    let none = MlpModel::init(&[11, 16, 1], 0.01, OutputKind::Linear, 1).unwrap();
    let expo = MlpModel::init(&[11, 16, 1], 0.01, OutputKind::Linear, 2).unwrap();
    let explainer = Explainer::LocalLinear(ExplainerConfig { m: 40, ..ExplainerConfig::default() });
    StudyModels::new(none, expo, ds, explainer, TaskSettings::default()).unwrap()
}

fn service(config: ServiceConfig) -> Arc<StudyService> {
    Arc::new(StudyService::new(Some(models()), config).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    assert_payload_is_blind(&text);
    (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
}

/// No coefficient signs, explanation internals or column names leave the server.
fn assert_payload_is_blind(text: &str) {
    let v: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(_) => return,
    };
    let mut names = housing().feature_names;
    names.push("MEDV".into());
    fn walk(v: &Value, key: &str, names: &[String]) {
        match v {
            Value::Object(m) => {
                for (k, x) in m {
                    assert!(!["coefficients", "intercept", "sign", "explanation", "current_x"].contains(&k.as_str()), "field {k}");
                    assert!(!names.contains(k), "column name {k} as a key");
                    if k == "magnitude" {
                        assert!(x.as_f64().unwrap() >= 0.0);
                    }
                    walk(x, k, names);
                }
            }
            Value::Array(a) => a.iter().for_each(|x| walk(x, key, names)),
            // panel labels "A" and "B" are the only strings allowed to clash
            Value::String(s) if key != "label" => assert!(!names.contains(s), "column name {s} under {key}"),
            _ => {}
        }
    }
    walk(&v, "", &names);
}

fn panel<'a>(session: &'a Value, label: &str) -> &'a Value {
    session["conditions"].as_array().unwrap().iter().find(|c| c["label"] == label).unwrap()
}

#[tokio::test]
async fn health_and_unloaded_service() {
    let app = router(service(ServiceConfig::default()));
    let (s, v) = call(&app, "GET", "/health", None).await;
    assert_eq!((s, v["status"].as_str()), (StatusCode::OK, Some("ready")));

    let empty = router(Arc::new(StudyService::new(None, ServiceConfig::default()).unwrap()));
    let (s, _) = call(&empty, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    let (s, v) = call(&empty, "POST", "/sessions", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["code"], "unavailable");
}

#[tokio::test]
async fn new_sessions_show_both_panels_from_the_same_point() {
    let app = router(service(ServiceConfig::default()));
    let (s, a) = call(&app, "POST", "/sessions", None).await;
    assert_eq!(s, StatusCode::CREATED);
    let (_, b) = call(&app, "POST", "/sessions", None).await;
    assert_ne!(a["session_id"], b["session_id"]);
    assert_eq!(a["session_id"].as_str().unwrap().len(), 32);
    let (pa, pb) = (panel(&a, "A"), panel(&a, "B"));
    assert_eq!(pa["step_count"], 0);
    assert_eq!(pa["status"], "active");
    let labels: Vec<&str> = pa["items"].as_array().unwrap().iter().map(|i| i["label"].as_str().unwrap()).collect();
    assert_eq!(labels, (1..=11).map(|i| format!("Item {i}")).collect::<Vec<_>>());
    // both panels start from the same x; prices differ only through the models
    assert_eq!(a["round"], 0);
    assert_eq!(a["rounds_total"], 5);
    assert!(pa["target_low"].as_f64() < pa["target_high"].as_f64());
    assert!(pb["price"].as_f64().is_some());
    let (s, again) = call(&app, "GET", &format!("/sessions/{}", a["session_id"].as_str().unwrap()), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(again, a);
}

#[tokio::test]
async fn assignment_is_balanced() {
    let svc = service(ServiceConfig { seed: 11, ..ServiceConfig::default() });
    let app = router(svc.clone());
    let mut a_expo = 0;
    for _ in 0..100 {
        let (_, v) = call(&app, "POST", "/sessions", None).await;
        let s = svc.session(v["session_id"].as_str().unwrap()).unwrap();
        if s.condition_a == Condition::ExpoModel {
            a_expo += 1;
        }
    }
    assert!((35..=65).contains(&a_expo), "{a_expo}");
}

#[tokio::test]
async fn steps_report_the_model_price() {
    let svc = service(ServiceConfig::default());
    let app = router(svc.clone());
    let (_, v) = call(&app, "POST", "/sessions", None).await;
    let id = v["session_id"].as_str().unwrap().to_owned();
    let m = svc.models().unwrap();
    let a = svc.session(&id).unwrap().condition_a;
    let b_before = panel(&v, "B").clone();
    let mut price = panel(&v, "A")["price"].as_f64().unwrap();
    for (i, item) in [3, 7, 1, 11, 5, 2].into_iter().enumerate() {
        let dir = if i % 2 == 0 { "plus" } else { "minus" };
        let (s, r) = call(&app, "POST", &format!("/sessions/{id}/rounds/0/steps"), Some(json!({"condition": "A", "item": item, "direction": dir}))).await;
        assert_eq!(s, StatusCode::OK, "{r}");
        assert_eq!(r["step_count"], i + 1);
        let x = svc.session(&id).unwrap().current_round(a).current_x.clone();
        let direct = m.price(m.model(a).predict_one(&x, 0));
        let shown = r["price"].as_f64().unwrap();
        assert!((shown - direct).abs() < 1e-9);
        let round = svc.session(&id).unwrap().current_round(a).clone();
        let last = round.history.last().unwrap();
        assert!(((shown - price) - (m.price(last.prediction_after) - m.price(last.prediction_before))).abs() < 1e-9);
        price = shown;
        let (_, now) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
        assert_eq!(panel(&now, "B"), &b_before);
        if r["status"] != "active" {
            let (s, _) = call(&app, "POST", &format!("/sessions/{id}/rounds/0/steps"), Some(json!({"condition": "A", "item": 1, "direction": "plus"}))).await;
            assert_eq!(s, StatusCode::CONFLICT);
            break;
        }
    }
}

#[tokio::test]
async fn error_responses_carry_codes() {
    let app = router(service(ServiceConfig::default()));
    let (s, v) = call(&app, "GET", "/sessions/nope", None).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
    let (s, v) = call(&app, "POST", "/sessions/nope/rounds/0/steps", Some(json!({"condition": "A", "item": 1, "direction": "plus"}))).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
    let (_, created) = call(&app, "POST", "/sessions", None).await;
    let id = created["session_id"].as_str().unwrap();
    let step = |body: Value, round: usize| (format!("/sessions/{id}/rounds/{round}/steps"), body);
    for (body, want) in [
        (json!({"condition": "A", "item": 0, "direction": "plus"}), StatusCode::BAD_REQUEST),
        (json!({"condition": "A", "item": 12, "direction": "plus"}), StatusCode::BAD_REQUEST),
        (json!({"condition": "C", "item": 1, "direction": "plus"}), StatusCode::BAD_REQUEST),
        (json!({"item": 1}), StatusCode::BAD_REQUEST),
    ] {
        let (uri, b) = step(body, 0);
        let (s, v) = call(&app, "POST", &uri, Some(b)).await;
        assert_eq!(s, want, "{v}");
        assert_eq!(v["code"], "bad_request");
        assert!(v["message"].is_string());
    }
    let (uri, b) = step(json!({"condition": "A", "item": 1, "direction": "plus"}), 3);
    assert_eq!(call(&app, "POST", &uri, Some(b)).await.0, StatusCode::NOT_FOUND);
    let (s, v) = call(&app, "POST", "/sessions/x/rounds/zero/steps", Some(json!({}))).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::BAD_REQUEST, Some("bad_request")));
    let (s, v) = call(&app, "GET", "/nothing", None).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));

    let answers = json!({"usefulness": "A", "expectation": "no_preference"});
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/questionnaire"), Some(answers)).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::CONFLICT, Some("conflict")));
}

async fn finish_by_abandoning(app: &Router, id: &str) {
    for round in 0..5 {
        for label in ["A", "B"] {
            let (s, v) = call(app, "POST", &format!("/sessions/{id}/rounds/{round}/abandon"), Some(json!({"condition": label}))).await;
            assert_eq!(s, StatusCode::OK, "{v}");
            if label == "B" {
                assert_eq!(v["round_complete"], true);
                assert_eq!(v["next_round"], if round < 4 { json!(round + 1) } else { Value::Null });
            }
        }
    }
}

#[tokio::test]
async fn full_session_and_aggregate() {
    let svc = service(ServiceConfig { seed: 3, ..ServiceConfig::default() });
    let app = router(svc.clone());
    let mut expected = (0, 0, 0);
    for k in 0..6 {
        let (_, v) = call(&app, "POST", "/sessions", None).await;
        let id = v["session_id"].as_str().unwrap().to_owned();
        finish_by_abandoning(&app, &id).await;
        let (_, v) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
        assert_eq!(v["finished"], true);
        let (s, _) = call(&app, "POST", &format!("/sessions/{id}/rounds/4/abandon"), Some(json!({"condition": "A"}))).await;
        assert_eq!(s, StatusCode::CONFLICT);
        let pick = ["A", "B", "no_preference"][k % 3];
        let answers = json!({"usefulness": pick, "expectation": "A", "free_text": "ok"});
        let (s, v) = call(&app, "POST", &format!("/sessions/{id}/questionnaire"), Some(answers.clone())).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        assert_eq!(v["status"], "recorded");
        assert_eq!(call(&app, "POST", &format!("/sessions/{id}/questionnaire"), Some(answers)).await.0, StatusCode::CONFLICT);
        let a = svc.session(&id).unwrap().condition_a;
        match (pick, a) {
            ("no_preference", _) => expected.2 += 1,
            ("A", Condition::ExpoModel) | ("B", Condition::NoneModel) => expected.0 += 1,
            _ => expected.1 += 1,
        }
    }
    let (_, agg) = call(&app, "GET", "/aggregate", None).await;
    assert_eq!(agg["sessions"], 6);
    assert_eq!(agg["completed"], 6);
    let u = &agg["usefulness"];
    assert_eq!((u["expo"].as_u64(), u["none"].as_u64(), u["no_preference"].as_u64()), (Some(expected.0), Some(expected.1), Some(expected.2)));
    assert_eq!(agg["none_model"]["abandoned_rounds"], 30);
    assert_eq!(agg["expo_model"]["mean_steps"], Value::Null);
}

#[tokio::test]
async fn restart_recovers_sessions_from_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig { seed: 5, log_path: Some(dir.path().join("steps.jsonl")), ..ServiceConfig::default() };
    let first = service(config.clone());
    let app = router(first.clone());
    let mut ids = Vec::new();
    for _ in 0..3 {
        let (_, v) = call(&app, "POST", "/sessions", None).await;
        let id = v["session_id"].as_str().unwrap().to_owned();
        for item in [2, 5, 9] {
            call(&app, "POST", &format!("/sessions/{id}/rounds/0/steps"), Some(json!({"condition": "B", "item": item, "direction": "plus"}))).await;
        }
        ids.push(id);
    }
    finish_by_abandoning(&app, &ids[2]).await;
    let before: Vec<_> = ids.iter().map(|id| first.session_view(id).unwrap()).collect();
    let agg = first.aggregate();
    drop(app);
    drop(first);

    let second = service(config);
    assert_eq!(second.session_count(), 3);
    for (id, view) in ids.iter().zip(&before) {
        assert_eq!(&second.session_view(id).unwrap(), view);
    }
    assert_eq!(second.aggregate(), agg);
    // the recovered service keeps going and keeps logging
    let app = router(second);
    let (s, _) = call(&app, "POST", &format!("/sessions/{}/rounds/0/steps", ids[0]), Some(json!({"condition": "A", "item": 1, "direction": "minus"}))).await;
    assert_eq!(s, StatusCode::OK);
    let (_, v) = call(&app, "POST", "/sessions", None).await;
    assert!(!ids.contains(&v["session_id"].as_str().unwrap().to_owned()));
}

#[tokio::test]
async fn display_cap_limits_items() {
    let app = router(service(ServiceConfig { display_cap: Some(4), ..ServiceConfig::default() }));
    let (_, v) = call(&app, "POST", "/sessions", None).await;
    let items = panel(&v, "A")["items"].as_array().unwrap();
    assert_eq!(items.len(), 4);
    let numbers: Vec<u64> = items.iter().map(|i| i["item"].as_u64().unwrap()).collect();
    assert!(numbers.windows(2).all(|w| w[0] < w[1]));
}
