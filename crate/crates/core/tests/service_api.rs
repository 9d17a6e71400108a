mod common;

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use chrono::{Duration, TimeZone, Utc};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use micg::config::AppConfig;
use micg::service::{http::router, Clock, Service};

/// Clock that starts at a fixed instant and advances only when told to.
struct TestClock(Arc<AtomicI64>);

impl TestClock {
    fn new() -> (Self, Clock) {
        let offset = Arc::new(AtomicI64::new(0));
        let o = offset.clone();
        let base = Utc.with_ymd_and_hms(2024, 6, 1, 9, 0, 0).unwrap();
        (TestClock(offset), Arc::new(move || base + Duration::seconds(o.load(Ordering::SeqCst))))
    }

    fn advance(&self, secs: i64) {
        self.0.fetch_add(secs, Ordering::SeqCst);
    }
}

fn app_config(dir: &std::path::Path) -> AppConfig {
    let mut cfg = AppConfig::default();
    cfg.server.data_dir = dir.to_path_buf();
    cfg.server.session_ttl_secs = 3600;
    cfg.training.samples = 20;
    cfg.network.hidden_layers = vec![4];
    cfg.ga.population_size = 16;
    cfg.ga.max_generations = 15;
    cfg.ga.stagnation_window = 50;
    cfg
}

fn open(dir: &std::path::Path, clock: Clock) -> Arc<Service> {
    Arc::new(Service::open(app_config(dir), clock).unwrap())
}

async fn call(svc: &Arc<Service>, method: &str, uri: &str, body: Option<Value>, headers: &[(&str, &str)]) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let body = match body {
        Some(b) => {
            req = req.header("content-type", "application/json");
            Body::from(b.to_string())
        }
        None => Body::empty(),
    };
    let resp = router(svc.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

async fn post(svc: &Arc<Service>, uri: &str, body: Value) -> (StatusCode, Value) {
    call(svc, "POST", uri, Some(body), &[]).await
}

async fn new_session(svc: &Arc<Service>, respondent: &str) -> String {
    let (s, v) = post(svc, "/sessions", json!({ "respondent_id": respondent, "role": "mother" })).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

fn all_indicators(value: u8) -> Value {
    let ids = micg::HierarchyConfig::default_config().indicator_ids();
    Value::Object(ids.into_iter().map(|i| (i, json!(value))).collect())
}

/// Elicitations, observations and timed responses for a few respondents.
async fn ingest(svc: &Arc<Service>) {
    let ids = micg::HierarchyConfig::default_config().indicator_ids();
    let el: Vec<Value> = ["r1", "r2"]
        .iter()
        .flat_map(|r| ids.iter().enumerate().map(move |(j, i)| json!({ "respondent_id": r, "indicator_id": i, "importance": 1 + j % 5, "confidence": 1 + (j + 2) % 5 })))
        .collect();
    let (s, v) = post(svc, "/elicitations", Value::Array(el)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    for (child, bits) in [("c1", 1u8), ("c2", 0)] {
        let (s, _) = post(svc, &format!("/children/{child}/indicators"), json!({ "values": all_indicators(bits) })).await;
        assert_eq!(s, StatusCode::CREATED);
    }
    for r in ["r1", "r2"] {
        let sid = new_session(svc, r).await;
        for (j, i) in ids.iter().enumerate().take(10) {
            let (s, v) = post(svc, &format!("/sessions/{sid}/responses"), json!({ "indicator_id": i, "rating": 1 + j % 5, "response_time_ms": 500 + 250 * j })).await;
            assert_eq!(s, StatusCode::CREATED, "{v}");
        }
        assert_eq!(post(svc, &format!("/sessions/{sid}/submit"), json!({})).await.0, StatusCode::OK);
    }
}

#[tokio::test]
async fn health_and_questionnaire() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path(), TestClock::new().1);
    let (s, v) = call(&svc, "GET", "/health", None, &[]).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    let (s, v) = call(&svc, "GET", "/questionnaires/micg-default", None, &[]).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["items"].as_array().unwrap().len(), 29);
    assert_eq!(call(&svc, "GET", "/questionnaires/nope", None, &[]).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn sessions_are_idempotent_per_key() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path(), TestClock::new().1);
    let body = json!({ "respondent_id": "r1", "role": "child", "questionnaire_id": "micg-default" });
    let (s1, a) = call(&svc, "POST", "/sessions", Some(body.clone()), &[("idempotency-key", "k1")]).await;
    let (_, b) = call(&svc, "POST", "/sessions", Some(body.clone()), &[("idempotency-key", "k1")]).await;
    let (_, c) = call(&svc, "POST", "/sessions", Some(body), &[("idempotency-key", "k2")]).await;
    assert_eq!(s1, StatusCode::CREATED);
    assert_eq!(a["status"], "open");
    assert_eq!(a["session_id"], b["session_id"]);
    assert_ne!(a["session_id"], c["session_id"]);
    let (s, v) = post(&svc, "/sessions", json!({ "respondent_id": "r1", "role": "child", "questionnaire_id": "missing" })).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], "not_found");
}

#[tokio::test]
async fn response_rules() {
    let dir = tempfile::tempdir().unwrap();
    let (clock, c) = TestClock::new();
    let svc = open(dir.path(), c);
    let sid = new_session(&svc, "r1").await;
    let uri = format!("/sessions/{sid}/responses");
    let ok = json!({ "indicator_id": "stunting", "rating": 4, "response_time_ms": 1500 });
    let (s, v) = post(&svc, &uri, ok.clone()).await;
    assert_eq!(s, StatusCode::CREATED);
    assert!(v["sequence"].as_u64().unwrap() > 0);
    assert_eq!(post(&svc, &uri, ok).await.0, StatusCode::CONFLICT);
    assert_eq!(post(&svc, &uri, json!({ "indicator_id": "wasting", "rating": 6, "response_time_ms": 10 })).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post(&svc, &uri, json!({ "indicator_id": "not_an_indicator", "rating": 3, "response_time_ms": 10 })).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post(&svc, &uri, json!({ "rating": 3 })).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post(&svc, "/sessions/sess-999999/responses", json!({ "indicator_id": "wasting", "rating": 3, "response_time_ms": 10 })).await.0, StatusCode::NOT_FOUND);

    clock.advance(3601);
    let (s, v) = post(&svc, &uri, json!({ "indicator_id": "wasting", "rating": 3, "response_time_ms": 10 })).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "session_state");
    assert_eq!(svc.session(&sid).unwrap().status, micg::service::SessionStatus::Expired);
    assert_eq!(post(&svc, &format!("/sessions/{sid}/submit"), json!({})).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn retried_response_with_key_is_recorded_once() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path(), TestClock::new().1);
    let sid = new_session(&svc, "r1").await;
    let uri = format!("/sessions/{sid}/responses");
    let body = json!({ "indicator_id": "stunting", "rating": 2, "response_time_ms": 800 });
    let (s1, a) = call(&svc, "POST", &uri, Some(body.clone()), &[("idempotency-key", "q-1")]).await;
    let (s2, b) = call(&svc, "POST", &uri, Some(body), &[("idempotency-key", "q-1")]).await;
    assert_eq!((s1, s2), (StatusCode::CREATED, StatusCode::CREATED));
    assert_eq!(a, b);
    assert_eq!(svc.snapshot().responses.len(), 1);
}

#[tokio::test]
async fn inference_preconditions() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path(), TestClock::new().1);
    for stage in ["posterior-update", "train-fitness", "compute-index"] {
        let (s, v) = post(&svc, &format!("/inference/{stage}"), json!({})).await;
        assert_eq!(s, StatusCode::PRECONDITION_FAILED, "{stage}: {v}");
    }
    assert_eq!(post(&svc, "/inference/everything", json!({})).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&svc, "GET", "/children/c1/report", None, &[]).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn full_flow_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let (clock, c) = TestClock::new();
    let svc = open(dir.path(), c.clone());
    ingest(&svc).await;

    let (s, first) = post(&svc, "/inference/posterior-update", json!({})).await;
    assert_eq!(s, StatusCode::OK, "{first}");
    assert_eq!(first["summary"]["new_observations"], 2);
    let (_, again) = post(&svc, "/inference/posterior-update", json!({})).await;
    assert_eq!(again["summary"]["new_observations"], 0);
    assert_eq!(again["summary"]["unchanged"], true);

    let (s, t1) = post(&svc, "/inference/train-fitness", json!({})).await;
    assert_eq!(s, StatusCode::OK, "{t1}");
    let (_, t2) = post(&svc, "/inference/train-fitness", json!({})).await;
    assert_eq!(t1["summary"], t2["summary"]);

    let (s, v) = post(&svc, "/inference/compute-index", json!({})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["summary"]["children"], 2);
    let (s, r1) = call(&svc, "GET", "/children/c1/report", None, &[]).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r1["overall"], 1.0);
    assert_eq!(call(&svc, "GET", "/children/c2/report", None, &[]).await.1["overall"], 0.0);
    assert_eq!(call(&svc, "GET", "/children/c9/report", None, &[]).await.0, StatusCode::NOT_FOUND);

    clock.advance(60);
    post(&svc, "/inference/compute-index", json!({})).await;
    let (_, r2) = call(&svc, "GET", "/children/c1/report", None, &[]).await;
    assert_ne!(r1["computed_at"], r2["computed_at"]);

    for f in ["beliefs.json", "params.json", "history.csv", "reports.json"] {
        assert!(dir.path().join("snapshots").join(f).exists(), "{f}");
    }

    let live = svc.snapshot();
    drop(svc);
    let reopened = open(dir.path(), c);
    assert_eq!(reopened.snapshot(), live);
    assert_eq!(reopened.get_index_report("c1").unwrap(), live.reports["c1"]);
}

#[tokio::test]
async fn bearer_token_guards_everything_but_health() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = app_config(dir.path());
    cfg.server.auth_token = Some("s3cret".into());
    let svc = Arc::new(Service::open(cfg, TestClock::new().1).unwrap());
    assert_eq!(call(&svc, "GET", "/health", None, &[]).await.0, StatusCode::OK);
    assert_eq!(call(&svc, "GET", "/questionnaires/micg-default", None, &[]).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(call(&svc, "GET", "/questionnaires/micg-default", None, &[("authorization", "Bearer nope")]).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(call(&svc, "GET", "/questionnaires/micg-default", None, &[("authorization", "Bearer s3cret")]).await.0, StatusCode::OK);
}

#[tokio::test]
async fn single_elicitation_object_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path(), TestClock::new().1);
    let (s, v) = post(&svc, "/elicitations", json!({ "respondent_id": "r", "indicator_id": "stunting", "importance": 5, "confidence": 5 })).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["recorded"], 1);
    let (s, _) = post(&svc, "/elicitations", json!({ "respondent_id": "r", "indicator_id": "stunting", "importance": 0, "confidence": 5 })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(&svc, "/children/c1/indicators", json!({ "values": { "stunting": 1 } })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}
