use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use dpd_cli::{fixtures_root, http::router};
use dpd_core::scenario::IMDB_QUERY;
use dpd_core::service::Service;

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn app(dir: &std::path::Path) -> Router {
    router(Service::init(dir, "imdb_sentiment", fixtures_root().as_deref()).unwrap())
}

fn assert_error(body: &Value, code: &str) {
    assert_eq!(body["code"], code, "{body}");
    assert!(body["message"].is_string());
    assert!(body.get("detail").is_some());
}

#[tokio::test]
async fn full_workflow_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    assert_eq!(call(&app, "GET", "/health", None).await, (StatusCode::OK, json!({"status": "ok"})));

    let (s, a) = call(&app, "POST", "/query/analyze", Some(json!({"sql": IMDB_QUERY, "user": "alice", "role": "data_scientist"}))).await;
    assert_eq!(s, StatusCode::OK);
    let session = a["session_id"].as_str().unwrap().to_string();

    let (s, body) = call(&app, "POST", "/execute", Some(json!({"session": session}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_error(&body, "invalid_state");

    let (s, r) = call(&app, "POST", "/plans/recommend", Some(json!({"session": session, "constraints": null, "seed": 0}))).await;
    assert_eq!(s, StatusCode::OK);
    let plan = r["top_k"][0]["plan_id"].as_str().unwrap().to_string();
    let eps = r["top_k"][0]["cost"]["epsilon"].as_f64().unwrap();

    let (s, _) = call(&app, "POST", "/plans/select", Some(json!({"session": session, "plan_id": plan}))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, e) = call(&app, "POST", "/execute", Some(json!({"session": session}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(e["receipt"]["epsilon_charged"].as_f64().unwrap(), eps);

    let (s, b) = call(&app, "GET", "/budget?user=alice", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(b.to_string().contains(&(50.0 - eps).to_string()), "{b}");

    let (s, _) = call(&app, "POST", "/feedback", Some(json!({"plan_id": plan, "latency_ms": 4.0, "accuracy": 0.95}))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, sess) = call(&app, "GET", &format!("/sessions/{session}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(sess["stage"], "feedback");
}

#[tokio::test]
async fn errors_carry_status_and_body() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());

    let (s, body) = call(&app, "POST", "/query/analyze", Some(json!({"sql": "SELECT FROM", "user": "alice", "role": "data_scientist"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&body, "syntax_error");

    let (s, body) = call(&app, "POST", "/query/analyze", Some(json!({"sql": 3}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&body, "invalid_request");

    let (s, body) = call(&app, "GET", "/catalog", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&body, "invalid_request");

    let (s, body) = call(&app, "GET", "/catalog?role=nobody", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_error(&body, "unknown_role");

    let (s, body) = call(&app, "GET", "/sessions/zzz", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_error(&body, "unknown_session");

    let (s, body) = call(&app, "POST", "/feedback", Some(json!({"plan_id": "never", "latency_ms": 1.0, "accuracy": 0.5}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_error(&body, "not_executed");
}
