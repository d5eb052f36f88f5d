mod common;

use std::time::Duration;

use common::{Canned, MockServer};
use seal::live::{LiveConfig, LiveProvider};
use seal_core::provider::{ChatMessage, ChatProvider, ChatRequest, FinishReason, ProviderError, Role, StageTag};

fn config(server: &MockServer, key: Option<&str>) -> LiveConfig {
    LiveConfig {
        url: server.url(),
        model: "test-model".into(),
        key: key.map(str::to_string),
        temperature: 0.2,
        max_tokens: 2048,
        timeout_secs: 10,
    }
}

fn request() -> ChatRequest {
    ChatRequest {
        messages: vec![
            ChatMessage::new(Role::System, "You are an analyst."),
            ChatMessage::new(Role::User, "List goals."),
        ],
        temperature: 0.2,
        max_tokens: 512,
        model_id: "test-model".into(),
        stage_tag: StageTag::P1,
    }
}

fn provider(server: &MockServer, key: Option<&str>) -> LiveProvider {
    LiveProvider::new(config(server, key)).with_backoff(vec![Duration::ZERO, Duration::ZERO])
}

#[test]
fn completion_round_trip() {
    let server = MockServer::start(vec![Canned::completion("```json\n{\"goals\":[]}\n```")], None);
    let mut p = provider(&server, Some("sk-test"));
    let response = p.complete(&request()).unwrap();
    assert_eq!(response.content, "```json\n{\"goals\":[]}\n```");
    assert_eq!(response.finish, FinishReason::Complete);
    assert_eq!(response.usage.prompt_tokens, 10);
    assert_eq!(p.identity(), "live:test-model");

    let seen = server.requests();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].request_line, "POST /v1/chat/completions HTTP/1.1");
    assert_eq!(seen[0].header("authorization"), Some("Bearer sk-test"));
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["max_tokens"], 512);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "List goals.");
}

#[test]
fn invalid_credential_is_an_auth_failure() {
    let server = MockServer::start(vec![Canned::new(401, r#"{"error":"bad key"}"#)], None);
    let err = provider(&server, Some("wrong")).complete(&request()).unwrap_err();
    assert_eq!(err.code(), "AuthFailure");
    assert!(!err.is_retryable());
    assert_eq!(server.requests().len(), 1, "auth failures are not retried");
}

#[test]
fn transport_failures_are_retried_twice() {
    let server = MockServer::start(
        vec![Canned::new(503, "busy"), Canned::new(500, "oops"), Canned::completion("ok")],
        None,
    );
    let response = provider(&server, None).complete(&request()).unwrap();
    assert_eq!(response.content, "ok");
    assert_eq!(server.requests().len(), 3);
    assert!(server.requests()[0].header("authorization").is_none());

    let down = MockServer::start(vec![Canned::new(502, "down")], None);
    let err = provider(&down, None).complete(&request()).unwrap_err();
    assert!(matches!(err, ProviderError::Transport { .. }));
    assert_eq!(down.requests().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = MockServer::start(vec![Canned::new(400, "bad request")], None);
    let err = provider(&server, None).complete(&request()).unwrap_err();
    assert_eq!(err.code(), "InvalidRequest");
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn unreachable_endpoint_is_a_transport_failure() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let cfg = LiveConfig {
        url: format!("http://{addr}"),
        model: "m".into(),
        key: None,
        temperature: 0.2,
        max_tokens: 16,
        timeout_secs: 5,
    };
    let err = LiveProvider::new(cfg)
        .with_backoff(vec![])
        .complete(&request())
        .unwrap_err();
    assert_eq!(err.code(), "TransportFailure");
}

#[test]
fn invalid_requests_never_leave_the_process() {
    let server = MockServer::start(vec![Canned::completion("x")], None);
    let mut bad = request();
    bad.messages.retain(|m| m.role != Role::User);
    let err = provider(&server, None).complete(&bad).unwrap_err();
    assert_eq!(err.code(), "InvalidRequest");
    assert!(server.requests().is_empty());
}
