use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use aegis_core::provider::{complete, ChatMessage, HttpProvider, ProviderConfig, ProviderError};
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

#[derive(Clone)]
struct Stub {
    calls: Arc<AtomicUsize>,
    statuses: Arc<Vec<u16>>,
    delay: Duration,
}

async fn handler(
    State(stub): State<Stub>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> (StatusCode, Json<Value>) {
    let n = stub.calls.fetch_add(1, Ordering::SeqCst);
    tokio::time::sleep(stub.delay).await;
    assert_eq!(
        headers.get("authorization").and_then(|v| v.to_str().ok()),
        Some("Bearer test-key")
    );
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["messages"][0]["role"], "system");
    let status = stub.statuses.get(n).copied().unwrap_or(200);
    let reply = json!({
        "choices": [{ "message": { "role": "assistant", "content": format!("reply {}", n + 1) } }]
    });
    (StatusCode::from_u16(status).unwrap(), Json(reply))
}

async fn serve(statuses: Vec<u16>, delay: Duration) -> (String, Arc<AtomicUsize>) {
    let calls = Arc::new(AtomicUsize::new(0));
    let stub = Stub {
        calls: calls.clone(),
        statuses: Arc::new(statuses),
        delay,
    };
    let app = Router::new()
        .route("/v1/chat/completions", post(handler))
        .with_state(stub);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/v1/chat/completions"), calls)
}

fn config(url: &str, key_env: &str) -> ProviderConfig {
    ProviderConfig {
        endpoint_url: url.to_string(),
        model_name: "stub-model".into(),
        timeout: Duration::from_secs(5),
        api_key_env: key_env.into(),
        backoff_base: Duration::from_millis(5),
        ..ProviderConfig::default()
    }
}

fn history() -> Vec<ChatMessage> {
    vec![ChatMessage::system("system prompt"), ChatMessage::user("hi")]
}

const KEY_ENV: &str = "AEGIS_TEST_STUB_KEY";

fn set_key() {
    // every test writes the same value
    std::env::set_var(KEY_ENV, "test-key");
}

#[tokio::test]
async fn two_server_errors_then_success_is_third_attempt() {
    set_key();
    let (url, calls) = serve(vec![500, 500, 200], Duration::ZERO).await;
    let res = complete(&HttpProvider::new(), &history(), &config(&url, KEY_ENV))
        .await
        .unwrap();
    assert_eq!(res.attempt, 3);
    assert_eq!(res.raw_text, "reply 3");
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn retries_are_bounded() {
    set_key();
    let (url, calls) = serve(vec![503; 10], Duration::ZERO).await;
    let err = complete(&HttpProvider::new(), &history(), &config(&url, KEY_ENV))
        .await
        .unwrap_err();
    assert!(matches!(err, ProviderError::Http { status: 503, .. }), "{err:?}");
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn credential_rejection_is_auth_error_without_retry() {
    set_key();
    let (url, calls) = serve(vec![401], Duration::ZERO).await;
    let err = complete(&HttpProvider::new(), &history(), &config(&url, KEY_ENV))
        .await
        .unwrap_err();
    assert!(matches!(err, ProviderError::Auth(_)), "{err:?}");
    assert_eq!(calls.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn client_error_is_not_retried() {
    set_key();
    let (url, calls) = serve(vec![400], Duration::ZERO).await;
    let err = complete(&HttpProvider::new(), &history(), &config(&url, KEY_ENV))
        .await
        .unwrap_err();
    assert!(matches!(err, ProviderError::Http { status: 400, .. }));
    assert_eq!(calls.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn missing_key_is_auth_error_before_any_request() {
    let (url, calls) = serve(vec![], Duration::ZERO).await;
    let err = complete(
        &HttpProvider::new(),
        &history(),
        &config(&url, "AEGIS_TEST_KEY_THAT_IS_NEVER_SET"),
    )
    .await
    .unwrap_err();
    assert!(matches!(err, ProviderError::Auth(_)));
    assert_eq!(calls.load(Ordering::SeqCst), 0);
}

#[tokio::test]
async fn slow_server_times_out() {
    set_key();
    let (url, calls) = serve(vec![], Duration::from_millis(400)).await;
    let cfg = ProviderConfig {
        timeout: Duration::from_millis(50),
        max_retries: 1,
        ..config(&url, KEY_ENV)
    };
    let started = std::time::Instant::now();
    let err = complete(&HttpProvider::new(), &history(), &cfg).await.unwrap_err();
    assert!(matches!(err, ProviderError::Timeout(_)), "{err:?}");
    assert_eq!(calls.load(Ordering::SeqCst), 2);
    // timeout x attempts + backoff, with slack for scheduling
    assert!(started.elapsed() < Duration::from_millis(50 * 2 + 5 + 300));
}

#[tokio::test]
async fn unreachable_endpoint_is_transport_error() {
    set_key();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let cfg = config(&format!("http://{addr}/v1/chat/completions"), KEY_ENV);
    let err = complete(&HttpProvider::new(), &history(), &cfg).await.unwrap_err();
    assert!(matches!(err, ProviderError::Transport(_)), "{err:?}");
}
