use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use graphsolve::gateway::{complete, ChatBackend, ChatRequest, OpenAiBackend, OpenAiConfig, TokenUsage};
use graphsolve::knowledge::{Embedder, RemoteEmbedder};
use graphsolve::Error;
use serde_json::{json, Value};

#[derive(Clone)]
struct Server {
    /// Status per request; the last entry repeats.
    statuses: Arc<Vec<u16>>,
    hits: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<Value>>>,
    auth: Arc<Mutex<Vec<String>>>,
}

async fn chat(State(s): State<Server>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let n = s.hits.fetch_add(1, Ordering::SeqCst);
    s.bodies.lock().unwrap().push(body);
    if let Some(h) = headers.get("authorization") {
        s.auth.lock().unwrap().push(h.to_str().unwrap().to_string());
    }
    let status = s.statuses[n.min(s.statuses.len() - 1)];
    let code = StatusCode::from_u16(status).unwrap();
    if status != 200 {
        return (code, Json(json!({"error": {"message": "scripted"}})));
    }
    (
        code,
        Json(json!({
            "choices": [{"message": {"role": "assistant", "content": "hello there"}}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 3}
        })),
    )
}

async fn embeddings(Json(body): Json<Value>) -> Json<Value> {
    assert!(body["input"].is_string());
    Json(json!({"data": [{"embedding": [3.0, 4.0]}]}))
}

async fn spawn(statuses: Vec<u16>) -> (String, Server) {
    let server = Server {
        statuses: Arc::new(statuses),
        hits: Arc::new(AtomicUsize::new(0)),
        bodies: Arc::new(Mutex::new(Vec::new())),
        auth: Arc::new(Mutex::new(Vec::new())),
    };
    let app = Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/v1/embeddings", post(embeddings))
        .with_state(server.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/v1"), server)
}

fn backend(base: &str) -> OpenAiBackend {
    let mut config = OpenAiConfig::new(base, "sk-test", "gpt-4o-mini");
    config.backoff_ms = 5;
    OpenAiBackend::new(config).unwrap()
}

#[tokio::test]
async fn parses_text_and_usage() {
    let (base, server) = spawn(vec![200]).await;
    let b = backend(&base);
    assert_eq!(b.id(), "openai:gpt-4o-mini");
    let mut request = ChatRequest::new("say hello");
    request.system_text = "be brief".into();
    let response = complete(&b, &request).await.unwrap();
    assert_eq!(response.text, "hello there");
    assert_eq!(response.usage, Some(TokenUsage::new(12, 3)));

    let body = server.bodies.lock().unwrap()[0].clone();
    assert_eq!(body["model"], "gpt-4o-mini");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["max_tokens"], 4096);
    assert_eq!(body["stream"], false);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "say hello");
    assert_eq!(server.auth.lock().unwrap()[0], "Bearer sk-test");
}

#[tokio::test]
async fn auth_failure_is_not_retried() {
    let (base, server) = spawn(vec![401]).await;
    let err = complete(&backend(&base), &ChatRequest::new("x")).await.unwrap_err();
    assert!(matches!(err, Error::Auth { status: 401 }));
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn server_errors_are_retried() {
    let (base, server) = spawn(vec![500, 429, 200]).await;
    let response = complete(&backend(&base), &ChatRequest::new("x")).await.unwrap();
    assert_eq!(response.text, "hello there");
    assert_eq!(server.hits.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn retries_are_bounded() {
    let (base, server) = spawn(vec![503]).await;
    let err = complete(&backend(&base), &ChatRequest::new("x")).await.unwrap_err();
    assert!(matches!(err, Error::Transport(_)));
    assert_eq!(server.hits.load(Ordering::SeqCst), 4);
}

#[tokio::test]
async fn client_errors_fail_fast() {
    let (base, server) = spawn(vec![400]).await;
    let err = complete(&backend(&base), &ChatRequest::new("x")).await.unwrap_err();
    assert!(matches!(err, Error::Transport(_)));
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn unreachable_endpoint_is_transport_error() {
    let mut config = OpenAiConfig::new("http://127.0.0.1:9", "k", "m");
    config.backoff_ms = 1;
    config.max_retries = 1;
    let err = complete(&OpenAiBackend::new(config).unwrap(), &ChatRequest::new("x"))
        .await
        .unwrap_err();
    assert!(err.is_infrastructure());
}

#[tokio::test]
async fn remote_embedder_normalizes() {
    let (base, _server) = spawn(vec![200]).await;
    let e = RemoteEmbedder::new(base, "k", "text-embedding-3-small").unwrap();
    assert_eq!(e.provider_id(), "remote:text-embedding-3-small");
    let v = e.embed("graph").await.unwrap();
    assert_eq!(v.components(), &[0.6, 0.8]);
}
