mod common;

use std::time::Instant;

use common::StubServer;
use raglab::corpus::{Origin, Passage, QueryRecord};
use raglab::gateway::{
    generate, GatewayError, GenerationParams, HttpBackend, HttpConfig, HttpTokenCounter,
};
use raglab::prompt::{compose_ordered, ContextDoc, PromptPlan, TokenCounter, WordRatioCounter};
use raglab::taxonomy::DocLabel;
use serde_json::Value;

fn plan() -> (PromptPlan, QueryRecord) {
    let record = QueryRecord {
        id: "q1".into(),
        question: "where is the tower?".into(),
        answers: vec!["paris".into()],
        gold_passage_id: Some("g".into()),
    };
    let ctx = vec![ContextDoc {
        passage: Passage::new(
            "g",
            "Tower",
            "the tower stands in paris",
            Origin::MainCorpus,
        ),
        label: DocLabel::Gold,
    }];
    let plan = compose_ordered(
        "Answer briefly.",
        &record.question,
        ctx,
        500,
        &WordRatioCounter::default(),
    )
    .unwrap();
    (plan, record)
}

fn config(server: &StubServer) -> HttpConfig {
    let mut cfg = HttpConfig::new(server.url("/v1/completions"), "test-model");
    cfg.backoff_ms = 1;
    cfg.timeout_secs = 5.0;
    cfg
}

#[test]
fn sends_wire_contract_and_trims_reply() {
    let server = StubServer::scripted(vec![(200, r#"{"text": "  paris \n"}"#.into())]);
    let backend = HttpBackend::new(config(&server)).unwrap();
    let (plan, record) = plan();
    let out = generate(&plan, &record, &GenerationParams::default(), &backend).unwrap();
    assert_eq!(out.text, "paris");

    let seen = server.requests();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].path, "/v1/completions");
    let body: Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["prompt"], plan.render());
    assert_eq!(body["max_tokens"], 15);
    assert_eq!(body["temperature"], 0.0);
}

#[test]
fn accepts_choices_shape() {
    let server = StubServer::scripted(vec![(200, r#"{"choices": [{"text": "lyon"}]}"#.into())]);
    let backend = HttpBackend::new(config(&server)).unwrap();
    let (plan, record) = plan();
    let out = generate(&plan, &record, &GenerationParams::default(), &backend).unwrap();
    assert_eq!(out.text, "lyon");
}

#[test]
fn retries_transient_statuses_then_succeeds() {
    let server = StubServer::scripted(vec![
        (503, "busy".into()),
        (429, "slow down".into()),
        (200, r#"{"text": "paris"}"#.into()),
    ]);
    let backend = HttpBackend::new(config(&server)).unwrap();
    let (plan, record) = plan();
    let out = generate(&plan, &record, &GenerationParams::default(), &backend).unwrap();
    assert_eq!(out.text, "paris");
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn gives_up_after_configured_retries() {
    let server = StubServer::scripted(vec![(500, "boom".into())]);
    let mut cfg = config(&server);
    cfg.retries = 2;
    let backend = HttpBackend::new(cfg).unwrap();
    let (plan, record) = plan();
    let err = generate(&plan, &record, &GenerationParams::default(), &backend).unwrap_err();
    assert!(matches!(err, GatewayError::Status { status: 500, ref body } if body == "boom"));
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn backoff_grows_exponentially() {
    let server = StubServer::scripted(vec![(502, "".into())]);
    let mut cfg = config(&server);
    cfg.retries = 3;
    cfg.backoff_ms = 20;
    let backend = HttpBackend::new(cfg).unwrap();
    let (plan, record) = plan();
    let started = Instant::now();
    generate(&plan, &record, &GenerationParams::default(), &backend).unwrap_err();
    // 20 + 40 + 80 ms of sleeping
    assert!(started.elapsed().as_millis() >= 140);
}

#[test]
fn client_errors_are_not_retried() {
    let server = StubServer::scripted(vec![(400, "bad request".into())]);
    let backend = HttpBackend::new(config(&server)).unwrap();
    let (plan, record) = plan();
    let err = generate(&plan, &record, &GenerationParams::default(), &backend).unwrap_err();
    assert!(matches!(err, GatewayError::Status { status: 400, .. }));
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn malformed_body_carries_raw_text() {
    let server = StubServer::scripted(vec![(200, "<html>oops</html>".into())]);
    let backend = HttpBackend::new(config(&server)).unwrap();
    let (plan, record) = plan();
    match generate(&plan, &record, &GenerationParams::default(), &backend) {
        Err(GatewayError::Malformed { body }) => assert_eq!(body, "<html>oops</html>"),
        other => panic!("expected malformed response error, got {other:?}"),
    }

    let server = StubServer::scripted(vec![(200, r#"{"output": "paris"}"#.into())]);
    let backend = HttpBackend::new(config(&server)).unwrap();
    assert!(matches!(
        generate(&plan, &record, &GenerationParams::default(), &backend),
        Err(GatewayError::Malformed { .. })
    ));
}

#[test]
fn transport_failure_after_retries() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let mut cfg = HttpConfig::new(format!("http://{addr}/v1/completions"), "m");
    cfg.retries = 1;
    cfg.backoff_ms = 1;
    let backend = HttpBackend::new(cfg).unwrap();
    let (plan, record) = plan();
    let err = generate(&plan, &record, &GenerationParams::default(), &backend).unwrap_err();
    assert!(
        matches!(err, GatewayError::Transport { attempts: 2, .. }),
        "{err:?}"
    );
}

#[test]
fn context_limit_blocks_the_request() {
    let server = StubServer::scripted(vec![(200, r#"{"text": "paris"}"#.into())]);
    let backend = HttpBackend::new(config(&server)).unwrap();
    let (plan, record) = plan();
    let params = GenerationParams::new(15, plan.token_count + 14).unwrap();
    assert!(matches!(
        generate(&plan, &record, &params, &backend),
        Err(GatewayError::ContextLimit { .. })
    ));
    assert!(server.requests().is_empty());
}

#[test]
fn auth_header_comes_from_environment() {
    let server = StubServer::scripted(vec![(200, r#"{"text": "paris"}"#.into())]);
    let mut cfg = config(&server);
    cfg.auth_header = Some("Authorization".into());
    cfg.auth_env = Some("RAGLAB_TEST_TOKEN".into());
    std::env::set_var("RAGLAB_TEST_TOKEN", "Bearer s3cret");
    let backend = HttpBackend::new(cfg).unwrap();
    let (plan, record) = plan();
    generate(&plan, &record, &GenerationParams::default(), &backend).unwrap();
    assert_eq!(
        server.requests()[0].header("authorization"),
        Some("Bearer s3cret")
    );

    let mut cfg = config(&server);
    cfg.auth_header = Some("Authorization".into());
    cfg.auth_env = Some("RAGLAB_TEST_TOKEN_UNSET".into());
    assert!(matches!(
        HttpBackend::new(cfg),
        Err(GatewayError::InvalidParams(_))
    ));
}

#[test]
fn tokenize_endpoint_counts_tokens() {
    let server = StubServer::start(|req| {
        let body: Value = serde_json::from_str(&req.body).unwrap();
        let n = body["text"].as_str().unwrap().chars().count();
        (200, format!(r#"{{"count": {n}}}"#))
    });
    let mut cfg = config(&server);
    cfg.tokenize_url = Some(server.url("/tokenize"));
    let backend = HttpBackend::new(cfg.clone()).unwrap();
    let counter = backend.token_counter().unwrap();
    assert_eq!(counter.count("hello").unwrap(), 5);
    assert_eq!(server.requests()[0].path, "/tokenize");

    let standalone = HttpTokenCounter::new(server.url("/tokenize"), &cfg).unwrap();
    assert_eq!(standalone.count("abc def").unwrap(), 7);

    let bad = StubServer::scripted(vec![(200, r#"{"tokens": 3}"#.into())]);
    let counter = HttpTokenCounter::new(bad.url("/tokenize"), &config(&bad)).unwrap();
    assert!(counter.count("x").is_err());
}

#[test]
fn tokenizer_drives_budgeting() {
    let server = StubServer::start(|req| {
        let body: Value = serde_json::from_str(&req.body).unwrap();
        let n = body["text"].as_str().unwrap().split_whitespace().count();
        (200, format!(r#"{{"count": {n}}}"#))
    });
    let counter = HttpTokenCounter::new(server.url("/tokenize"), &config(&server)).unwrap();
    let (plan, record) = plan();
    let rebuilt = compose_ordered(
        &plan.instruction,
        &record.question,
        plan.context.clone(),
        1000,
        &counter,
    )
    .unwrap();
    assert_eq!(
        rebuilt.token_count,
        plan.render().split_whitespace().count()
    );
}
