mod common;

use std::sync::{Arc, Mutex};

use axum::routing::post;
use axum::{Json, Router};
use labelbias_core::backend::{server, FinishReason, GenerateRequest, MockBackend, NativeClient, OpenAiCompletions, ScoreRequest};
use labelbias_core::{Backend, BackendError, CanaryRule, ChoiceLabel, MockConfig};
use serde_json::{json, Value};

fn served_mock(config: MockConfig) -> (server::ServerHandle, NativeClient) {
    let handle = server::spawn(Arc::new(MockBackend::new(config).unwrap()), "127.0.0.1:0".parse().unwrap()).unwrap();
    let client = NativeClient::new(&handle.url()).unwrap();
    (handle, client)
}

#[test]
fn native_client_round_trips_through_the_server() {
    let config = MockConfig {
        canary_table: vec![CanaryRule::for_label(ChoiceLabel::C, 0.9)],
        ..MockConfig::default()
    };
    let local = MockBackend::new(config.clone()).unwrap();
    let (_server, client) = served_mock(config);
    let context = common::read_fixture("prompts/cf_context_identity_B.txt").replace("choice B is", "choice C is");
    let req = ScoreRequest::new(context, " Yes");
    assert_eq!(client.score(&req).unwrap(), local.score(&req).unwrap());
    assert!((client.score(&req).unwrap().probability() - 0.9).abs() < 1e-12);

    let gen = GenerateRequest {
        context: common::read_fixture("prompts/apricot_context_identity_C.txt"),
        max_new_tokens: 3,
        temperature: 1.0,
        seed: 99,
        stop: vec![],
    };
    let remote = client.generate(&gen).unwrap();
    assert_eq!(remote, local.generate(&gen).unwrap());
    assert_eq!(remote.finish_reason, FinishReason::Length);
}

#[test]
fn backend_errors_survive_the_wire() {
    let (_server, client) = served_mock(MockConfig {
        max_context_bytes: Some(8),
        ..MockConfig::default()
    });
    let err = client.score(&ScoreRequest::new("far too long a context", " Yes")).unwrap_err();
    assert!(matches!(err, BackendError::ContextOverflow(_)), "{err:?}");
}

#[test]
fn unreachable_server_is_a_retryable_transport_error() {
    let addr = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let client = NativeClient::new(&format!("http://{addr}")).unwrap();
    let err = client.score(&ScoreRequest::new("x", " y")).unwrap_err();
    assert!(err.is_retryable(), "{err:?}");
}

/// Fake completions endpoint: echoes whitespace-led tokens of the prompt
/// with logprob -0.5 each, or omits logprobs when `with_logprobs` is off.
fn fake_openai(with_logprobs: bool, seen: Arc<Mutex<Vec<Value>>>) -> server::ServerHandle {
    let app = Router::new().route(
        "/v1/completions",
        post(move |Json(body): Json<Value>| {
            let seen = seen.clone();
            async move {
                seen.lock().unwrap().push(body.clone());
                if body["echo"] == json!(true) {
                    let prompt = body["prompt"].as_str().unwrap().to_string();
                    let tokens = labelbias_core::backend::mock::split_tokens(&prompt);
                    let mut offsets = Vec::new();
                    let mut at = 0;
                    for t in &tokens {
                        offsets.push(at);
                        at += t.chars().count();
                    }
                    let mut logprobs: Vec<Value> = tokens.iter().map(|_| json!(-0.5)).collect();
                    logprobs[0] = Value::Null;
                    let lp = json!({"tokens": tokens, "token_logprobs": logprobs, "text_offset": offsets});
                    let choice = if with_logprobs {
                        json!({"text": prompt, "finish_reason": "length", "logprobs": lp})
                    } else {
                        json!({"text": prompt, "finish_reason": "length", "logprobs": null})
                    };
                    Json(json!({"choices": [choice]}))
                } else {
                    Json(json!({"choices": [{"text": " because", "finish_reason": "length"}]}))
                }
            }
        }),
    );
    server::spawn_router(app, "127.0.0.1:0".parse().unwrap()).unwrap()
}

#[test]
fn openai_adapter_sums_only_continuation_tokens() {
    let seen = Arc::default();
    let handle = fake_openai(true, Arc::clone(&seen));
    let adapter = OpenAiCompletions::connect(&handle.url(), "tiny").unwrap();
    let resp = adapter.score(&ScoreRequest::new("Is it true? I think", " it is")).unwrap();
    assert_eq!(resp.pieces.len(), 2);
    assert!((resp.total_logprob + 1.0).abs() < 1e-12);

    let gen = adapter
        .generate(&GenerateRequest {
            context: "Why?".into(),
            max_new_tokens: 1,
            temperature: 0.0,
            seed: 3,
            stop: vec![],
        })
        .unwrap();
    assert_eq!(gen.finish_reason, FinishReason::Length);
    let bodies = seen.lock().unwrap();
    let score_body = &bodies[1];
    assert_eq!(score_body["max_tokens"], json!(0));
    assert_eq!(score_body["logprobs"], json!(1));
    assert_eq!(score_body["model"], json!("tiny"));
    assert_eq!(bodies.last().unwrap()["seed"], json!(3));
}

#[test]
fn openai_endpoint_without_echo_logprobs_is_refused() {
    let handle = fake_openai(false, Arc::default());
    let err = OpenAiCompletions::connect(&format!("{}/v1", handle.url()), "tiny").unwrap_err();
    assert!(matches!(err, BackendError::Capability(_)), "{err:?}");
}
