#[path = "support/stub.rs"]
mod stub;

use adarank_core::backends::{
    BackendConfig, BackendError, ChatBackend, ChatRequest, EmbeddingBackend, HttpChatClient, HttpEmbeddingClient,
    RetryPolicy,
};
use adarank_core::protocol::ChatMessage;
use stub::{chat_ok, StubServer};

fn config(url: &str) -> BackendConfig {
    BackendConfig {
        endpoint: url.to_string(),
        model: "stub-model".into(),
        api_key_env: "ADARANK_TEST_KEY_UNSET".into(),
        timeout_secs: 5,
        retry: RetryPolicy { base_delay_ms: 5, factor: 2.0, max_attempts: 5 },
        ..Default::default()
    }
}

fn request() -> ChatRequest {
    ChatRequest::new("stub-model", vec![ChatMessage::user("rank these")])
}

#[test]
fn retries_rate_limits_then_succeeds() {
    let server = StubServer::start(vec![
        (429, "{\"error\":\"slow down\"}".into()),
        (429, "{\"error\":\"slow down\"}".into()),
        (200, chat_ok("[2] > [1]")),
    ]);
    let client = HttpChatClient::new(&config(&server.url));
    let (resp, attempts) = client.chat_counted(&request()).unwrap();
    assert_eq!(attempts, 3);
    assert_eq!(resp.text, "[2] > [1]");
    assert_eq!((resp.prompt_tokens, resp.completion_tokens), (11, 3));
    let seen = server.join();
    assert_eq!(seen.len(), 3);
    let body = seen[2].split("\r\n\r\n").nth(1).unwrap();
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(v["model"], "stub-model");
    assert_eq!(v["temperature"], 0.0);
    assert_eq!(v["messages"][0]["role"], "user");
}

#[test]
fn unauthorized_fails_without_retry() {
    let server = StubServer::start(vec![(401, "{\"error\":\"bad key\"}".into())]);
    let client = HttpChatClient::new(&config(&server.url));
    match client.chat(&request()) {
        Err(BackendError::Rejected { status, .. }) => assert_eq!(status, 401),
        other => panic!("expected rejection, got {other:?}"),
    }
    assert_eq!(server.join().len(), 1);
}

#[test]
fn server_errors_exhaust_attempts() {
    let server = StubServer::start(vec![(503, "{}".into()); 3]);
    let mut cfg = config(&server.url);
    cfg.retry.max_attempts = 3;
    let client = HttpChatClient::new(&cfg);
    assert!(matches!(client.chat(&request()), Err(BackendError::Unavailable { attempts: 3, .. })));
    assert_eq!(server.join().len(), 3);
}

#[test]
fn content_filter_is_a_refusal() {
    let body = serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": ""}, "finish_reason": "content_filter"}]
    });
    let server = StubServer::start(vec![(200, body.to_string())]);
    let client = HttpChatClient::new(&config(&server.url));
    assert!(matches!(client.chat(&request()), Err(BackendError::Refusal(_))));
    server.join();
}

#[test]
fn api_key_sent_as_bearer_but_never_described() {
    let server = StubServer::start(vec![(200, chat_ok("[0]"))]);
    let mut cfg = config(&server.url);
    cfg.api_key_env = "ADARANK_TEST_KEY_SET".into();
    std::env::set_var("ADARANK_TEST_KEY_SET", "sk-test-123");
    let client = HttpChatClient::new(&cfg);
    client.chat(&request()).unwrap();
    let seen = server.join();
    assert!(seen[0].to_ascii_lowercase().contains("authorization: bearer sk-test-123"));
    assert!(!client.describe().contains("sk-test"));
    assert!(!serde_json::to_string(&cfg).unwrap().contains("sk-test"));
}

#[test]
fn embeddings_batched_and_reordered() {
    let batch1 = serde_json::json!({"data": [
        {"index": 1, "embedding": [0.0, 1.0]},
        {"index": 0, "embedding": [1.0, 0.0]}
    ]});
    let batch2 = serde_json::json!({"data": [{"index": 0, "embedding": [0.5, 0.5]}]});
    let server = StubServer::start(vec![(200, batch1.to_string()), (200, batch2.to_string())]);
    let mut cfg = config(&server.url);
    cfg.embedding_endpoint = Some(server.url.replace("chat/completions", "embeddings"));
    cfg.embedding_model = Some("stub-embed".into());
    cfg.embed_batch_size = 2;
    let client = HttpEmbeddingClient::new(&cfg).unwrap();
    let v = client.embed(&["a".into(), "b".into(), "c".into()]).unwrap();
    assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]);
    let seen = server.join();
    assert_eq!(seen.len(), 2);
    assert!(seen[0].contains("\"input\":[\"a\",\"b\"]"));
}

#[test]
fn embedding_dimension_mismatch_reported() {
    let body = serde_json::json!({"data": [
        {"index": 0, "embedding": [1.0, 0.0]},
        {"index": 1, "embedding": [1.0]}
    ]});
    let server = StubServer::start(vec![(200, body.to_string())]);
    let mut cfg = config(&server.url);
    cfg.embedding_endpoint = Some(server.url.clone());
    let client = HttpEmbeddingClient::new(&cfg).unwrap();
    assert!(matches!(
        client.embed(&["a".into(), "b".into()]),
        Err(BackendError::DimensionMismatch { expected: 2, got: 1, index: 1 })
    ));
    server.join();
}
