mod support;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::IntoResponse;
use axum::routing::post;
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use poempixel::live::{build_providers, HttpEndpoint, LiveChat, LiveEmbedder, LiveImageGenerator, LiveScorer};
use poempixel_core::providers::mock::encode_solid_png;
use poempixel_core::providers::{
    AlignmentScorer, ChatProvider, ChatRequest, Embedder, EndpointConfig, ImageArtifact, ImageGenerator,
    ImageParams, Limited, ProviderConfig, ProviderError, ProviderKind, RateLimiter, RetryPolicy,
};
use serde_json::{json, Value};
use support::spawn_app;

#[derive(Clone, Default)]
struct Seen {
    bodies: Arc<Mutex<Vec<Value>>>,
    auth: Arc<Mutex<Vec<String>>>,
    calls: Arc<AtomicUsize>,
}

impl Seen {
    fn record(&self, headers: &HeaderMap, body: Value) -> usize {
        self.bodies.lock().unwrap().push(body);
        let auth = headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .unwrap_or_default()
            .to_string();
        self.auth.lock().unwrap().push(auth);
        self.calls.fetch_add(1, Ordering::SeqCst) + 1
    }
}

const T: Duration = Duration::from_secs(5);

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        initial_backoff: Duration::from_millis(5),
        multiplier: 1.0,
    }
}

fn png() -> Vec<u8> {
    encode_solid_png(4, 3, [10, 20, 30], &[]).unwrap()
}

#[test]
fn chat_sends_openai_shape_and_reads_first_choice() {
    let seen = Seen::default();
    let app = Router::new()
        .route(
            "/v1/chat/completions",
            post(|State(s): State<Seen>, h: HeaderMap, Json(b): Json<Value>| async move {
                s.record(&h, b);
                Json(json!({"choices": [{"message": {"role": "assistant", "content": "  A parrot dreams.  "}}]}))
            }),
        )
        .with_state(seen.clone());
    let server = spawn_app(app);
    let chat = LiveChat::new(&server.url("/v1/"), "gpt-test", Some("k1".into()), T);
    let mut req = ChatRequest::new("Summarize this").with_seed(9);
    req.system_context = Some("be brief".into());
    assert_eq!(chat.complete(&req).unwrap(), "  A parrot dreams.  ");
    assert_eq!(chat.model_tag(), "gpt-test");

    let body = seen.bodies.lock().unwrap()[0].clone();
    assert_eq!(body["model"], "gpt-test");
    assert_eq!(body["seed"], 9);
    assert_eq!(body["messages"][0], json!({"role": "system", "content": "be brief"}));
    assert_eq!(body["messages"][1], json!({"role": "user", "content": "Summarize this"}));
    assert!(body["temperature"].is_number() && body["max_tokens"].is_number());
    assert_eq!(seen.auth.lock().unwrap()[0], "Bearer k1");
}

#[test]
fn chat_without_content_is_a_contract_error() {
    let app = Router::new().route("/chat/completions", post(|| async { Json(json!({"choices": []})) }));
    let server = spawn_app(app);
    let chat = LiveChat::new(&server.url(""), "m", None, T);
    let err = chat.complete(&ChatRequest::new("x")).unwrap_err();
    assert!(matches!(err, ProviderError::Contract(_)), "{err:?}");
}

#[test]
fn embeddings_come_back_in_input_order() {
    let app = Router::new().route(
        "/embeddings",
        post(|Json(b): Json<Value>| async move {
            assert_eq!(b["model"], "emb");
            let n = b["input"].as_array().unwrap().len();
            // answer in reverse order; the client must sort by index
            let data: Vec<Value> = (0..n)
                .rev()
                .map(|i| json!({"index": i, "embedding": [i as f64 + 1.0, 0.5]}))
                .collect();
            Json(json!({"data": data}))
        }),
    );
    let server = spawn_app(app);
    let e = LiveEmbedder::new(&server.url(""), "emb", None, T);
    let out = e.embed(&["a".into(), "b".into(), "c".into()]).unwrap();
    let firsts: Vec<f64> = out.iter().map(|v| v.values[0]).collect();
    assert_eq!(firsts, vec![1.0, 2.0, 3.0]);
    assert!(e.embed(&[]).unwrap().is_empty());
}

#[test]
fn embedding_count_mismatch_is_rejected() {
    let app = Router::new().route(
        "/embeddings",
        post(|| async { Json(json!({"data": [{"index": 0, "embedding": [1.0]}]})) }),
    );
    let server = spawn_app(app);
    let e = LiveEmbedder::new(&server.url(""), "emb", None, T);
    assert!(e.embed(&["a".into(), "b".into()]).is_err());
}

#[test]
fn status_codes_map_to_error_kinds() {
    let app = Router::new().route(
        "/status/{code}",
        post(|Path(code): Path<u16>| async move {
            let status = StatusCode::from_u16(code).unwrap();
            if status.is_success() {
                (status, "not json").into_response()
            } else {
                (status, Json(json!({"error": "nope"}))).into_response()
            }
        }),
    );
    let server = spawn_app(app);
    let call = |code: u16| HttpEndpoint::new(server.url(&format!("/status/{code}")), None, T).post(&json!({}));
    assert!(matches!(call(401), Err(ProviderError::Auth(_))));
    assert!(matches!(call(403), Err(ProviderError::Auth(_))));
    assert!(matches!(call(429), Err(ProviderError::Unavailable(_))));
    assert!(matches!(call(503), Err(ProviderError::Unavailable(_))));
    assert!(matches!(call(400), Err(ProviderError::Validation(_))));
    assert!(matches!(call(200), Err(ProviderError::Contract(_))));
}

#[test]
fn unreachable_host_is_a_transport_error() {
    let addr = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    // listener dropped, so the port refuses connections
    let err = HttpEndpoint::new(format!("http://{addr}/x"), None, T).post(&json!({})).unwrap_err();
    assert!(matches!(err, ProviderError::Transport(_)), "{err:?}");
    assert!(err.is_retryable());
}

#[test]
fn transient_failures_are_retried_and_auth_failures_are_not() {
    let seen = Seen::default();
    let app = Router::new()
        .route(
            "/flaky/chat/completions",
            post(|State(s): State<Seen>, h: HeaderMap, Json(b): Json<Value>| async move {
                if s.record(&h, b) < 3 {
                    (StatusCode::SERVICE_UNAVAILABLE, "busy").into_response()
                } else {
                    Json(json!({"choices": [{"message": {"content": "ok"}}]})).into_response()
                }
            }),
        )
        .route(
            "/denied/chat/completions",
            post(|| async { (StatusCode::UNAUTHORIZED, "bad key") }),
        )
        .with_state(seen.clone());
    let server = spawn_app(app);

    let flaky = Limited::new(
        LiveChat::new(&server.url("/flaky"), "m", None, T),
        RateLimiter::new(1),
        fast_retry(),
    );
    assert_eq!(flaky.complete(&ChatRequest::new("x")).unwrap(), "ok");
    assert_eq!(seen.calls.load(Ordering::SeqCst), 3);

    let denied = Limited::new(
        LiveChat::new(&server.url("/denied"), "m", None, T),
        RateLimiter::new(1),
        fast_retry(),
    );
    assert!(matches!(denied.complete(&ChatRequest::new("x")), Err(ProviderError::Auth(_))));
}

#[test]
fn image_generator_decodes_png_and_reports_provider_errors() {
    let app = Router::new()
        .route(
            "/gen",
            post(|Json(b): Json<Value>| async move {
                assert_eq!((b["width"].as_u64(), b["height"].as_u64(), b["seed"].as_u64()), (Some(4), Some(3), Some(11)));
                assert_eq!(b["instruction"], "a red bird");
                Json(json!({"image_b64": B64.encode(png())}))
            }),
        )
        .route("/broken", post(|| async { Json(json!({"error": "nsfw filter"})) }))
        .route("/garbage", post(|| async { Json(json!({"image_b64": B64.encode(b"not a png")})) }));
    let server = spawn_app(app);
    let params = ImageParams {
        width: 4,
        height: 3,
        seed: Some(11),
    };
    let g = LiveImageGenerator::new(&server.url("/gen"), Some("sd-test"), None, T);
    let img = g.generate("a red bird", &params).unwrap();
    assert_eq!((img.width, img.height, img.seed), (4, 3, Some(11)));
    assert_eq!(img.bytes, png());
    assert_eq!(img.provider_tag, "sd-test");

    let broken = LiveImageGenerator::new(&server.url("/broken"), None, None, T);
    assert!(matches!(broken.generate("x", &params), Err(ProviderError::Generation(_))));
    let garbage = LiveImageGenerator::new(&server.url("/garbage"), None, None, T);
    assert!(matches!(garbage.generate("x", &params), Err(ProviderError::Contract(_))));
    assert!(matches!(g.generate(" ", &params), Err(ProviderError::InvalidInput(_))));
}

#[test]
fn scorer_round_trips_image_and_text() {
    let app = Router::new()
        .route(
            "/score",
            post(|Json(b): Json<Value>| async move {
                let bytes = B64.decode(b["image_b64"].as_str().unwrap()).unwrap();
                assert_eq!(bytes, png());
                assert_eq!(b["text"], "a bird");
                Json(json!({"itm": 0.8, "itc": 0.31}))
            }),
        )
        .route("/half", post(|| async { Json(json!({"itm": 0.8})) }));
    let server = spawn_app(app);
    let image = ImageArtifact {
        bytes: png(),
        width: 4,
        height: 3,
        provider_tag: "t".into(),
        seed: None,
        instruction_text: String::new(),
    };
    let s = LiveScorer::new(&server.url("/score"), None, T).score(&image, "a bird").unwrap();
    assert_eq!((s.itm, s.itc), (0.8, 0.31));
    let half = LiveScorer::new(&server.url("/half"), None, T).score(&image, "a bird");
    assert!(matches!(half, Err(ProviderError::Contract(_))));
}

#[test]
fn live_endpoint_without_credential_is_not_configured() {
    let mut cfg = ProviderConfig::all_mock();
    cfg.chat = EndpointConfig {
        kind: ProviderKind::Live,
        base_url: Some("http://127.0.0.1:9".into()),
        model: Some("m".into()),
        credential_env: Some("POEMPIXEL_TEST_UNSET_KEY".into()),
        ..EndpointConfig::default()
    };
    let err = build_providers(&cfg, 0).err().expect("missing credential");
    assert!(matches!(&err, ProviderError::NotConfigured(m) if m.contains("POEMPIXEL_TEST_UNSET_KEY")), "{err}");
}

#[test]
fn live_chat_is_built_from_config_and_env() {
    let app = Router::new().route(
        "/chat/completions",
        post(|h: HeaderMap| async move {
            let auth = h.get("authorization").unwrap().to_str().unwrap().to_string();
            Json(json!({"choices": [{"message": {"content": auth}}]}))
        }),
    );
    let server = spawn_app(app);
    // a variable name only this test uses, so parallel tests cannot race on it
    std::env::set_var("POEMPIXEL_TEST_CHAT_KEY_WIRE", "secret-1");
    let mut cfg = ProviderConfig::all_mock();
    cfg.chat = EndpointConfig {
        kind: ProviderKind::Live,
        base_url: Some(server.url("")),
        model: Some("m".into()),
        credential_env: Some("POEMPIXEL_TEST_CHAT_KEY_WIRE".into()),
        ..EndpointConfig::default()
    };
    let p = build_providers(&cfg, 0).unwrap();
    assert_eq!(p.chat.complete(&ChatRequest::new("hi")).unwrap(), "Bearer secret-1");
    assert_eq!(p.embedder.model_tag(), build_providers(&ProviderConfig::all_mock(), 0).unwrap().embedder.model_tag());
}
