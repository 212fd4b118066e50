//! The remote backend against a local OpenAI-compatible mock.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use memstrata_core::providers::{RemoteConfig, RemoteProvider, SummaryKind};
use memstrata_core::{retrieval, validate_config, Provider, RawConfig, UserMemory};
use serde_json::{json, Value};

const DIM: usize = 8;

#[derive(Clone, Default)]
struct Mock {
    requests: Arc<Mutex<Vec<(String, Value)>>>,
    auth: Arc<Mutex<Vec<Option<String>>>>,
    fail_next: Arc<AtomicUsize>,
}

impl Mock {
    fn record(&self, path: &str, headers: &HeaderMap, body: &Value) -> bool {
        self.requests.lock().unwrap().push((path.to_string(), body.clone()));
        self.auth
            .lock()
            .unwrap()
            .push(headers.get("authorization").and_then(|v| v.to_str().ok()).map(String::from));
        self.fail_next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
    }
}

fn chat_answer(prompt: &str) -> String {
    if prompt.contains("single word: yes or no") {
        "Yes.".into()
    } else if prompt.contains("lowercase keywords") {
        "Garden, tomatoes, watering".into()
    } else if prompt.contains("single JSON object") {
        r#"Here you go: {"traits": {"openness": {"value": "high", "confidence": 0.9},
            "not_a_dimension": {"value": "x"}},
            "user_facts": ["grows tomatoes", ""], "agent_facts": ["suggested morning watering"]}"#
            .into()
    } else if prompt.contains("topic summary") || prompt.contains("consecutive dialogue") {
        "Gardening: tomatoes and watering.".into()
    } else {
        "Water them in the morning.".into()
    }
}

async fn chat(State(mock): State<Mock>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    if mock.record("chat", &headers, &body) {
        return (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"error": "busy"})));
    }
    let prompt = body["messages"][1]["content"].as_str().unwrap_or_default();
    let answer = chat_answer(prompt);
    (StatusCode::OK, Json(json!({"choices": [{"message": {"role": "assistant", "content": answer}}]})))
}

async fn embeddings(State(mock): State<Mock>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    if mock.record("embeddings", &headers, &body) {
        return (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"error": "busy"})));
    }
    let text = body["input"].as_str().unwrap_or_default();
    let mut v = vec![0.0; DIM];
    for (i, b) in text.bytes().enumerate() {
        v[(i + b as usize) % DIM] += 1.0;
    }
    (StatusCode::OK, Json(json!({"data": [{"embedding": v, "index": 0}]})))
}

fn start(mock: Mock) -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let app = Router::new()
                .route("/v1/chat/completions", post(chat))
                .route("/v1/embeddings", post(embeddings))
                .with_state(mock);
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

fn provider(addr: SocketAddr) -> Provider {
    let mut cfg = RemoteConfig::new(format!("http://{addr}/v1/"), "mock-model", DIM);
    cfg.api_key = Some("k-123".into());
    cfg.backoff = Duration::from_millis(5);
    Provider::new(Arc::new(RemoteProvider::new(cfg).unwrap()))
}

#[test]
fn remote_backend_speaks_openai_shapes() {
    let mock = Mock::default();
    let addr = start(mock.clone());
    let p = provider(addr);

    assert_eq!(p.embed("hello").unwrap().len(), DIM);
    let kw = p.extract_keywords("I water my garden tomatoes").unwrap();
    assert_eq!(kw.into_iter().collect::<Vec<_>>(), ["garden", "tomatoes", "watering"]);
    assert_eq!(
        p.summarize(SummaryKind::SegmentSummary, &["a".into(), "b".into()]).unwrap(),
        "Gardening: tomatoes and watering."
    );
    assert_eq!(p.complete("how do I water?").unwrap(), "Water them in the morning.");

    let reqs = mock.requests.lock().unwrap().clone();
    assert_eq!(reqs[0].1["model"], "text-embedding-3-small");
    assert_eq!(reqs[0].1["input"], "hello");
    let chat = &reqs[1].1;
    assert_eq!(chat["model"], "mock-model");
    assert_eq!(chat["temperature"], 0);
    assert_eq!(chat["messages"][0]["role"], "system");
    assert!(chat["messages"][1]["content"].as_str().unwrap().contains("I water my garden tomatoes"));
    assert!(mock.auth.lock().unwrap().iter().all(|a| a.as_deref() == Some("Bearer k-123")));
}

#[test]
fn remote_backend_drives_the_engine() {
    let mock = Mock::default();
    let addr = start(mock.clone());
    let p = provider(addr);
    let config = validate_config(RawConfig {
        stm_capacity: Some(1),
        embedding_dim: Some(DIM),
        heat_tau: Some(1.5),
        ..Default::default()
    })
    .unwrap();

    let mut mem = UserMemory::new("r", &config).unwrap();
    mem.ingest("my tomatoes wilt", "water more", &config, &p, 10).unwrap();
    let r = mem.ingest("they still wilt", "try mornings", &config, &p, 20).unwrap();
    assert!(r.overflowed.is_some());
    // A fresh segment has heat 0 + 1 + 1 = 2 > 1.5, so it was promoted.
    assert_eq!(r.promoted.len(), 1);
    assert_eq!(mem.persona.user_traits["openness"].value, "high");
    assert!(!mem.persona.user_traits.contains_key("not_a_dimension"));
    let facts: Vec<_> = mem.persona.user_kb.iter().map(|f| f.text.as_str()).collect();
    assert_eq!(facts, ["grows tomatoes"]);
    mem.check_invariants(Some(&config)).unwrap();

    let out = retrieval::respond(&mut mem, "what about my tomatoes?", &config, &p, 30).unwrap();
    assert_eq!(out.text, "Water them in the morning.");
}

#[test]
fn transient_failures_are_retried_then_surface() {
    let mock = Mock::default();
    let addr = start(mock.clone());
    let p = provider(addr);

    mock.fail_next.store(2, Ordering::SeqCst);
    assert_eq!(p.complete("hi").unwrap(), "Water them in the morning.");
    assert_eq!(mock.requests.lock().unwrap().len(), 3);
    // One log entry per gateway call, however many HTTP attempts it took.
    assert_eq!(p.log_len(), 1);

    mock.fail_next.store(3, Ordering::SeqCst);
    assert!(p.complete("hi").unwrap_err().is_provider_unavailable());
    assert_eq!(mock.requests.lock().unwrap().len(), 6);
}
