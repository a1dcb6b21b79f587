use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

use scene4d_core::parser::{parse_with_backend, Provenance};
use scene4d_engine::backend::HttpPlanBackend;
use scene4d_engine::server::{router, AppState, SharedBackend};
use scene4d_engine::{EngineConfig, ErrorBody};

fn config() -> EngineConfig {
    let mut cfg = EngineConfig {
        width: 32,
        height: 32,
        frames: 4,
        gaussians_per_object: 60,
        ..EngineConfig::default()
    };
    cfg.distill.steps = 300;
    cfg
}

struct Api {
    app: axum::Router,
    _dir: tempfile::TempDir,
}

impl Api {
    fn new(backend: Option<SharedBackend>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let state = Arc::new(AppState::new(dir.path(), config(), backend));
        Self {
            app: router(state),
            _dir: dir,
        }
    }

    async fn call(&self, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>, Option<String>) {
        let mut req = Request::builder().method(method).uri(uri);
        if body.is_some() {
            req = req.header(header::CONTENT_TYPE, "application/json");
        }
        let req = req.body(Body::from(body.unwrap_or("").to_string())).unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let ctype = resp
            .headers()
            .get(header::CONTENT_TYPE)
            .map(|v| v.to_str().unwrap().to_string());
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, bytes, ctype)
    }

    async fn json(&self, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, serde_json::Value) {
        let (status, bytes, _) = self.call(method, uri, body).await;
        (status, serde_json::from_slice(&bytes).unwrap())
    }

    async fn error(&self, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, ErrorBody) {
        let (status, bytes, _) = self.call(method, uri, body).await;
        (status, serde_json::from_slice(&bytes).unwrap())
    }
}

#[tokio::test]
async fn healthz() {
    let api = Api::new(None);
    let (status, body) = api.json(Method::GET, "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
}

#[tokio::test]
async fn full_interactive_loop() {
    let api = Api::new(None);
    let (status, created) = api.json(Method::POST, "/sessions", Some(r#"{"seed": 3}"#)).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = created["id"].as_str().unwrap().to_string();
    assert_eq!(created["version"], 0);
    assert_eq!(created["frame_count"], 4);

    let (status, gen) = api
        .json(
            Method::POST,
            &format!("/sessions/{id}/command"),
            Some(r#"{"text": "The red ball rolls quickly to the right"}"#),
        )
        .await;
    assert_eq!(status, StatusCode::OK, "{gen}");
    assert_eq!(gen["module"], "GEN");
    assert_eq!(gen["version"], 1);

    let (status, png, ctype) = api
        .call(Method::GET, &format!("/sessions/{id}/frame?t=2&cam=orbit"), None)
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    assert!(png.starts_with(b"\x89PNG\r\n\x1a\n"));

    let (status, edit) = api
        .json(
            Method::POST,
            &format!("/sessions/{id}/command"),
            Some(r#"{"text": "Make the ball blue"}"#),
        )
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(edit["edit"]["verb"], "recolor");
    assert_eq!(edit["edit"]["selected_count"], 60);
    assert!(edit["edit"]["threshold_trace"].as_array().unwrap().len() > 1);

    let (_, history) = api.json(Method::GET, &format!("/sessions/{id}/history"), None).await;
    assert_eq!(history["current_version"], 2);
    assert_eq!(history["history"].as_array().unwrap().len(), 2);
    assert_eq!(history["history"][1]["command"], "Make the ball blue");

    let (status, undo) = api.json(Method::POST, &format!("/sessions/{id}/undo"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(undo["version"], 1);
    assert_eq!(undo["scene_hash"], gen["scene_hash"]);

    // Custom orbit views are accepted.
    let (status, _, _) = api
        .call(Method::GET, &format!("/sessions/{id}/frame?t=0&cam=1.0,0.3,5"), None)
        .await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn errors_are_structured() {
    let api = Api::new(None);
    let (_, created) = api.json(Method::POST, "/sessions", None).await;
    let id = created["id"].as_str().unwrap().to_string();

    let (status, e) = api.error(Method::GET, "/sessions/nope/history", None).await;
    assert_eq!((status, e.code.as_str()), (StatusCode::NOT_FOUND, "session_not_found"));
    let (status, e) = api.error(Method::GET, "/sessions/..%2F..%2Fetc/history", None).await;
    assert_eq!((status, e.code.as_str()), (StatusCode::NOT_FOUND, "session_not_found"));

    let uri = format!("/sessions/{id}/command");
    let (status, e) = api.error(Method::POST, &uri, Some(r#"{"text": ""}"#)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!((e.module.as_str(), e.code.as_str()), ("command-parser", "empty_command"));

    let (status, e) = api.error(Method::POST, &uri, Some(r#"{"txt": "x"}"#)).await;
    assert_eq!((status, e.code.as_str()), (StatusCode::BAD_REQUEST, "bad_request"));
    assert_eq!(e.module, "engine-service");

    let (status, e) = api.error(Method::POST, &uri, Some(r#"{"text": "Remove the ball"}"#)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!((e.module.as_str(), e.code.as_str()), ("editor", "empty_selection"));

    let (status, e) = api.error(Method::POST, &format!("/sessions/{id}/undo"), None).await;
    assert_eq!((status, e.code.as_str()), (StatusCode::CONFLICT, "nothing_to_undo"));

    for q in ["t=9", "t=-1", "cam=sideways", "cam=1,2,-3"] {
        let (status, e) = api.error(Method::GET, &format!("/sessions/{id}/frame?{q}"), None).await;
        assert_eq!((status, e.code.as_str()), (StatusCode::BAD_REQUEST, "bad_request"), "{q}");
    }

    let (status, e) = api.error(Method::GET, "/nowhere", None).await;
    assert_eq!((status, e.code.as_str()), (StatusCode::NOT_FOUND, "no_such_endpoint"));

    let (status, e) = api.error(Method::POST, "/sessions", Some(r#"{"frames": 1}"#)).await;
    assert_eq!((status, e.code.as_str()), (StatusCode::BAD_REQUEST, "bad_request"));

    let (_, history) = api.json(Method::GET, &format!("/sessions/{id}/history"), None).await;
    assert_eq!(history["current_version"], 0);
}

/// Minimal HTTP/1.1 server answering `responses` in order, one per
/// connection, and returning the request bodies it saw.
fn fake_backend(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/plan", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            bodies.push(String::from_utf8(buf).unwrap());
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
        bodies
    });
    (url, handle)
}

#[test]
fn http_backend_plans_and_fallbacks() {
    let plan = r#"{"module": "EDIT", "queries": {"verb": "recolor", "target_phrase": "ball", "new_color": "green"}}"#;
    let (url, server) = fake_backend(vec![
        (200, plan.to_string()),
        (500, "{}".to_string()),
        (200, r#"{"module": "EDIT", "queries": {"verb": "remove"}}"#.to_string()),
    ]);
    let backend = HttpPlanBackend::new(url, std::time::Duration::from_secs(5)).unwrap();

    let out = parse_with_backend("tint the ball green", &backend).unwrap();
    assert_eq!(out.provenance, Provenance::Backend);
    assert_eq!(out.plan.as_edit().unwrap().new_color.as_deref(), Some("green"));

    let out = parse_with_backend("Make the ball green", &backend).unwrap();
    assert!(matches!(out.provenance, Provenance::Fallback { ref reason } if reason.contains("500")));

    let out = parse_with_backend("Make the ball green", &backend).unwrap();
    assert!(matches!(out.provenance, Provenance::Fallback { .. }));
    assert_eq!(out.plan.as_edit().unwrap().new_color.as_deref(), Some("green"));

    let bodies = server.join().unwrap();
    let first: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(first["command"], "tint the ball green");
    assert!(first["schema"]["oneOf"].is_array());
}

#[test]
fn unreachable_backend_falls_back_to_the_grammar() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = HttpPlanBackend::new(format!("http://127.0.0.1:{port}/"), std::time::Duration::from_secs(2)).unwrap();
    let out = parse_with_backend("Delete the cube", &backend).unwrap();
    assert!(matches!(out.provenance, Provenance::Fallback { .. }));
}

#[tokio::test]
async fn server_routes_commands_through_the_backend() {
    let plan = r#"{"module": "GEN", "queries": {"object_phrase": "cube", "direction": "up", "speed": "slow"}}"#;
    let (url, server) = fake_backend(vec![(200, plan.to_string())]);
    let backend = tokio::task::spawn_blocking(move || HttpPlanBackend::new(url, std::time::Duration::from_secs(5)))
        .await
        .unwrap()
        .unwrap();
    let backend: SharedBackend = Arc::new(backend);
    let api = Api::new(Some(backend));
    let (_, created) = api.json(Method::POST, "/sessions", None).await;
    let id = created["id"].as_str().unwrap();
    let (status, r) = api
        .json(Method::POST, &format!("/sessions/{id}/command"), Some(r#"{"text": "a slowly rising box"}"#))
        .await;
    assert_eq!(status, StatusCode::OK, "{r}");
    assert_eq!(r["provenance"]["source"], "backend");
    assert_eq!(r["plan"]["queries"]["object_phrase"], "cube");
    server.join().unwrap();
}
