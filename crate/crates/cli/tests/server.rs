use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use ien::model::{init_params, IenConfig};
use ien::scene::Grid;
use ien_cli::server::{router, AppState, ServerConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(idle_timeout: Duration) -> Router {
    let cfg = IenConfig { grid: Grid::new(32, 32), ..IenConfig::tiny(1) };
    let params = init_params::<f32>(&cfg, 3).unwrap();
    let state = AppState::new(
        params,
        cfg,
        ServerConfig { threshold: 0.6, idle_timeout, static_dir: None },
    );
    router(Arc::new(state))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn create(app: &Router, seed: u64) -> (String, Value) {
    let (status, body) = call(app, Method::POST, "/api/session", Some(json!({"seed": seed}))).await;
    assert_eq!(status, StatusCode::CREATED);
    (body["id"].as_str().unwrap().to_string(), body)
}

fn frame(i: usize, body: &Value) -> Value {
    let b = &body["bboxes"][0];
    let tx = b[0].as_f64().unwrap() + b[2].as_f64().unwrap() / 2.0;
    let ty = b[1].as_f64().unwrap() + b[3].as_f64().unwrap() / 2.0;
    let s = i as f64 / 20.0;
    json!({"x": 22.0 + (tx - 22.0) * s, "y": 30.0 + (ty - 30.0) * s, "t": i as f64 / 30.0})
}

#[tokio::test]
async fn session_lifecycle() {
    let app = app(Duration::from_secs(300));
    let (id, created) = create(&app, 9).await;
    assert_eq!(created["grid"], json!([32, 32]));
    let n = created["bboxes"].as_array().unwrap().len();
    assert!((2..=3).contains(&n));

    let mut latched: Option<Value> = None;
    for i in 0..20 {
        let (status, body) =
            call(&app, Method::POST, &format!("/api/session/{id}/frame"), Some(frame(i, &created))).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["frame"], json!(i + 1));
        let probs: Vec<f64> = serde_json::from_value(body["probabilities"].clone()).unwrap();
        assert_eq!(probs.len(), n);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(body["heatmap"].as_array().unwrap().len(), 32 * 32);
        match &latched {
            Some(d) => assert_eq!(&body["decision"], d),
            None if !body["decision"].is_null() => latched = Some(body["decision"].clone()),
            None => {}
        }
    }

    let (status, body) = call(&app, Method::GET, &format!("/api/session/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["frames_received"], json!(20));
    assert_eq!(body["trace"].as_array().unwrap().len(), 15);
    assert_eq!(body["scene"], created["scene"]);

    let (status, _) = call(&app, Method::DELETE, &format!("/api/session/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, body) = call(&app, Method::GET, &format!("/api/session/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "not_found");
}

#[tokio::test]
async fn interleaved_sessions_are_isolated() {
    let app = app(Duration::from_secs(300));
    let (a, body_a) = create(&app, 1).await;
    let (b, body_b) = create(&app, 2).await;
    assert_ne!(a, b);
    let solo = {
        let (c, body_c) = create(&app, 1).await;
        let mut last = Value::Null;
        for i in 0..4 {
            last = call(&app, Method::POST, &format!("/api/session/{c}/frame"), Some(frame(i, &body_c))).await.1;
        }
        last
    };
    let mut last_a = Value::Null;
    for i in 0..4 {
        last_a = call(&app, Method::POST, &format!("/api/session/{a}/frame"), Some(frame(i, &body_a))).await.1;
        call(&app, Method::POST, &format!("/api/session/{b}/frame"), Some(frame(i, &body_b))).await;
    }
    assert_eq!(last_a["probabilities"], solo["probabilities"]);
    assert_eq!(last_a["heatmap"], solo["heatmap"]);
    let (_, sb) = call(&app, Method::GET, &format!("/api/session/{b}"), None).await;
    assert_eq!(sb["frames_received"], json!(4));
}

#[tokio::test]
async fn idle_sessions_expire() {
    let app = app(Duration::from_millis(50));
    let (id, _) = create(&app, 4).await;
    tokio::time::sleep(Duration::from_millis(120)).await;
    let (status, body) =
        call(&app, Method::POST, &format!("/api/session/{id}/frame"), Some(json!({"x": 1.0, "y": 1.0, "t": 0.0})))
            .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "not_found");
}

#[tokio::test]
async fn malformed_requests_get_json_errors() {
    let app = app(Duration::from_secs(300));
    let (status, body) = call(&app, Method::POST, "/api/session", Some(json!({"n_objects": 7}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "bad_request");
    let (id, _) = create(&app, 5).await;
    let (status, body) =
        call(&app, Method::POST, &format!("/api/session/{id}/frame"), Some(json!({"x": "left"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["message"].as_str().unwrap().contains("JSON"));
    let (status, _) = call(&app, Method::DELETE, "/api/session/none", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, body) = call(&app, Method::GET, "/api/nothing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "not_found");
}
