use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use rtlrag::corpus::{build_documents, load_corpus};
use rtlrag::llmclient::{
    CompletionProvider, CompletionRequest, MockProvider, PromptStyle, ProviderConfig, ProviderError, ProviderRegistry,
    RetryPolicy,
};
use rtlrag::{Engine, HashedNgramEmbedder};
use rtlrag_service::{load_providers, router, AppState, StateOptions};

/// Long enough to clear a 0.15 threshold under the hashing embedder.
const ADDER_QUERY: &str =
    "Design a 4-bit adder named adder4 with inputs a and b, a 4-bit sum output and a carry out.";
const SENTINEL: &str = "sk-SENTINEL-7f3a9c1e-do-not-log";

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

#[derive(Clone, Default)]
struct LogBuffer(Arc<Mutex<Vec<u8>>>);

impl Write for LogBuffer {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Every test in this binary logs at TRACE into one buffer, `log` records included.
fn logs() -> &'static LogBuffer {
    static LOGS: OnceLock<LogBuffer> = OnceLock::new();
    LOGS.get_or_init(|| {
        let buf = LogBuffer::default();
        let writer = buf.clone();
        tracing_subscriber::fmt()
            .with_max_level(tracing::Level::TRACE)
            .with_ansi(false)
            .with_writer(move || writer.clone())
            .try_init()
            .expect("subscriber");
        buf
    })
}

fn engine() -> Arc<Engine> {
    static ENGINE: OnceLock<Arc<Engine>> = OnceLock::new();
    ENGINE
        .get_or_init(|| {
            let docs = build_documents(&load_corpus(&fixture("corpus50.jsonl")).unwrap());
            Arc::new(Engine::from_documents(docs, Arc::new(HashedNgramEmbedder::new(384))).unwrap())
        })
        .clone()
}

fn opts(max_in_flight: usize) -> StateOptions {
    StateOptions {
        default_provider: None,
        retry: RetryPolicy::no_delay(),
        max_in_flight,
    }
}

fn mock(file: &str) -> Arc<MockProvider> {
    Arc::new(MockProvider::from_json(&std::fs::read_to_string(fixture(file)).unwrap()).unwrap())
}

fn ready_state(registry: ProviderRegistry, max_in_flight: usize) -> AppState {
    logs();
    let state = AppState::new(registry, opts(max_in_flight));
    assert!(state.install_engine(engine()));
    state
}

fn standard_state() -> AppState {
    let mut reg = ProviderRegistry::new();
    reg.add_shared("golden", mock("mock_golden.json"));
    reg.add_shared("broken", mock("mock_broken.json"));
    reg.add_shared(
        "refuser",
        Arc::new(MockProvider::from_json(r#"{"default":[{"refusal":"policy"}]}"#).unwrap()),
    );
    reg.add_shared(
        "down",
        Arc::new(MockProvider::from_json(r#"{"default":[{"transport_error":"connection reset"}]}"#).unwrap()),
    );
    ready_state(reg, 4)
}

async fn call(state: &AppState, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn post(state: &AppState, uri: &str, body: Value) -> (StatusCode, Value) {
    call(state, "POST", uri, Some(&body.to_string())).await
}

#[tokio::test]
async fn unavailable_until_engine_is_installed() {
    logs();
    let state = AppState::new(ProviderRegistry::new(), opts(2));
    let (s, body) = call(&state, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["status"], "loading");
    let (s, body) = post(&state, "/retrieve", json!({"query": "adder"})).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"]["code"], "not_ready");
    let (s, _) = post(&state, "/generate", json!({"query": "adder", "provider": "x"})).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);

    assert!(state.install_engine(engine()));
    assert!(!state.install_engine(engine()));
    let (s, body) = call(&state, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["index_size"], 50);
}

#[tokio::test]
async fn health_reports_index_and_is_stable() {
    let state = standard_state();
    let (s, first) = call(&state, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(first["status"], "ok");
    assert_eq!(first["index_size"], 50);
    assert_eq!(first["dim"], 384);
    assert_eq!(first["embedder"], "hashed-ngram");
    assert_eq!(first["providers"], json!(["broken", "down", "golden", "refuser"]));
    for _ in 0..20 {
        assert_eq!(call(&state, "GET", "/health", None).await.1, first);
    }
}

#[tokio::test]
async fn retrieve_is_deterministic_and_sorted() {
    let state = standard_state();
    let body = json!({"query": ADDER_QUERY, "retrieval": {"tau": 0.15}});
    let (s, a) = post(&state, "/retrieve", body.clone()).await;
    assert_eq!(s, StatusCode::OK, "{a}");
    let (_, b) = post(&state, "/retrieve", body).await;
    assert_eq!(a["retrieved"], b["retrieved"]);
    assert_eq!(a["trace"], b["trace"]);
    assert_eq!(a["pool"], b["pool"]);

    let pool = a["pool"].as_array().unwrap();
    assert_eq!(pool.len(), 10);
    let scores: Vec<f64> = pool.iter().map(|p| p["relevance"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{scores:?}");
    let selected = a["retrieved"].as_array().unwrap();
    assert!(!selected.is_empty() && selected.len() <= 5);
    assert_eq!(a["trace"]["selected"], selected.len());
    for (sel, p) in selected.iter().zip(pool) {
        assert_eq!(sel["doc_id"], p["doc_id"]);
        assert!(sel["text"].as_str().unwrap().contains("module"));
    }
}

#[tokio::test]
async fn retrieve_respects_disabled_mode() {
    let state = standard_state();
    let (s, body) = post(&state, "/retrieve", json!({"query": "fifo", "retrieval": {"mode": "disabled"}})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["retrieved"], json!([]));
    assert_eq!(body["trace"]["reason"], "disabled");
}

#[tokio::test]
async fn generate_returns_code_and_context() {
    let state = standard_state();
    let (s, body) = post(
        &state,
        "/generate",
        json!({"query": ADDER_QUERY, "provider": "golden", "retrieval": {"tau": 0.15}}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{body}");
    let code = body["code"].as_str().unwrap();
    assert!(code.starts_with("module adder4"), "{code}");
    assert!(code.trim_end().ends_with("endmodule"));
    assert!(!code.contains("```"));
    assert_eq!(body["extraction"]["source"], "tagged_fence");
    assert_eq!(body["provider"], "golden");
    assert_eq!(body["attempts"], 1);
    let retrieved = body["retrieved"].as_array().unwrap();
    assert!(!retrieved.is_empty());
    assert!(retrieved.iter().all(|r| r["evicted"] == false && r.get("text").is_none()));
    for key in ["retrieval_ms", "prompt_ms", "generation_ms", "extraction_ms"] {
        assert!(body["timings"][key].as_f64().unwrap() >= 0.0);
    }
}

#[tokio::test]
async fn generate_is_deterministic_with_a_mock() {
    let state = standard_state();
    let req = json!({"query": ADDER_QUERY, "provider": "golden", "retrieval": {"tau": 0.15}});
    let (_, a) = post(&state, "/generate", req.clone()).await;
    let (_, b) = post(&state, "/generate", req).await;
    for key in ["code", "retrieved", "trace", "extraction"] {
        assert_eq!(a[key], b[key], "{key}");
    }
}

#[tokio::test]
async fn validation_errors_are_400_with_field() {
    let state = standard_state();
    let cases = [
        (json!({"query": "   ", "provider": "golden"}), "query"),
        (json!({"query": "", "provider": "golden"}), "query"),
        (json!({"query": "adder", "provider": "nope"}), "provider"),
        (json!({"query": "adder"}), "provider"),
        (json!({"query": "adder", "provider": "golden", "retrieval": {"pool_size": 2}}), "retrieval"),
        (json!({"query": "adder", "provider": "golden", "retrieval": {"mode": "fixed:0"}}), "retrieval"),
        (json!({"query": "adder", "provider": "golden", "generation": {"top_p": 2.0}}), "generation"),
        (json!({"query": "adder", "provider": "golden", "generation": {"temperature": -1.0}}), "generation"),
        (json!({"query": "adder", "provider": "golden", "generation": {"profile": "wild"}}), "generation"),
        (json!({"query": "adder", "provider": "golden", "unexpected": 1}), "body"),
        (json!({"provider": "golden"}), "body"),
    ];
    for (body, field) in cases {
        let (s, resp) = post(&state, "/generate", body.clone()).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{body} -> {resp}");
        assert_eq!(resp["error"]["field"], field, "{body} -> {resp}");
    }
    let (s, resp) = post(&state, "/retrieve", json!({"query": ""})).await;
    assert_eq!((s, resp["error"]["field"].as_str()), (StatusCode::BAD_REQUEST, Some("query")));
    for raw in ["{not json", "", "[]", "{\"query\": 5}"] {
        let (s, resp) = call(&state, "POST", "/generate", Some(raw)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{raw:?} -> {resp}");
    }
}

#[tokio::test]
async fn provider_failures_are_502() {
    let state = standard_state();
    for provider in ["refuser", "down"] {
        let (s, body) = post(&state, "/generate", json!({"query": "a 4-bit adder", "provider": provider})).await;
        assert_eq!(s, StatusCode::BAD_GATEWAY, "{provider}: {body}");
        assert_eq!(body["error"]["code"], "provider_failed");
    }
}

#[tokio::test]
async fn non_code_answers_fall_back_to_whole_text() {
    let state = standard_state();
    let (s, body) = post(&state, "/generate", json!({"query": "a 4-bit adder", "provider": "broken"})).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert_eq!(body["extraction"]["source"], "whole_text");
}

/// Sleeps and records the peak number of overlapping calls.
struct SlowProvider {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl CompletionProvider for SlowProvider {
    fn name(&self) -> &str {
        "slow"
    }
    fn max_concurrency(&self) -> usize {
        64
    }
    fn complete(&self, _: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(150));
        self.current.fetch_sub(1, Ordering::SeqCst);
        Ok("module slow; endmodule".into())
    }
}

async fn peak_concurrency(max_in_flight: usize) -> usize {
    let slow = Arc::new(SlowProvider {
        current: AtomicUsize::new(0),
        peak: AtomicUsize::new(0),
    });
    let mut reg = ProviderRegistry::new();
    reg.add_shared("slow", slow.clone());
    let state = ready_state(reg, max_in_flight);
    let mut tasks = Vec::new();
    for _ in 0..4 {
        let state = state.clone();
        tasks.push(tokio::spawn(async move {
            post(&state, "/generate", json!({"query": "anything", "provider": "slow"})).await.0
        }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    slow.peak.load(Ordering::SeqCst)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn provider_calls_are_bounded_globally() {
    assert_eq!(peak_concurrency(1).await, 1);
    let wide = peak_concurrency(4).await;
    assert!((2..=4).contains(&wide), "peak {wide}");
}

/// One-shot upstream that records the raw request and answers 200.
fn upstream(reply: &'static str) -> (String, std::sync::mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut raw = String::new();
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
            raw.push_str(&line);
            if line == "\r\n" {
                break;
            }
        }
        let mut buf = vec![0; len];
        reader.read_exact(&mut buf).unwrap();
        raw.push_str(&String::from_utf8_lossy(&buf));
        tx.send(raw).unwrap();
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
            reply.len()
        )
        .unwrap();
    });
    (format!("http://{addr}/v1/chat/completions"), rx)
}

#[tokio::test]
async fn session_key_reaches_provider_but_never_logs() {
    let (url, rx) = upstream(r#"{"choices":[{"message":{"content":"```verilog\nmodule k; endmodule\n```"}}]}"#);
    let mut reg = ProviderRegistry::new();
    reg.add_http(ProviderConfig {
        name: "remote".into(),
        endpoint: url,
        model: "m".into(),
        auth_header: "Authorization".into(),
        key_env: None,
        style: PromptStyle::Chat,
        max_concurrency: 1,
        timeout_s: Some(10),
    });
    let state = ready_state(reg, 2);
    let (s, body) = post(
        &state,
        "/generate",
        json!({"query": "a 4-bit adder", "provider": "remote", "api_key": SENTINEL}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert_eq!(body["code"], "module k; endmodule");
    assert!(!body.to_string().contains(SENTINEL));

    let raw = rx.recv().unwrap();
    assert!(raw.contains(&format!("Bearer {SENTINEL}")), "key was not forwarded");

    // a failing call with the key present as well
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut reg = ProviderRegistry::new();
    reg.add_http(ProviderConfig {
        name: "gone".into(),
        endpoint: format!("http://127.0.0.1:{port}/"),
        model: "m".into(),
        auth_header: "Authorization".into(),
        key_env: None,
        style: PromptStyle::Chat,
        max_concurrency: 1,
        timeout_s: Some(5),
    });
    let state = ready_state(reg, 2);
    let (s, body) = post(
        &state,
        "/generate",
        json!({"query": "a 4-bit adder", "provider": "gone", "api_key": SENTINEL}),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_GATEWAY);
    assert!(!body.to_string().contains(SENTINEL));

    let captured = String::from_utf8_lossy(&logs().0.lock().unwrap()).into_owned();
    assert!(captured.contains("generate"), "subscriber captured nothing");
    assert!(!captured.contains(SENTINEL), "session key leaked into logs");
}

#[test]
fn provider_file_resolves_relative_mocks_and_default() {
    let dir = tempfile_dir();
    std::fs::copy(fixture("mock_golden.json"), dir.join("golden.json")).unwrap();
    let path = dir.join("providers.toml");
    std::fs::write(
        &path,
        r#"
default = "gold"

[[http]]
name = "gpt"
endpoint = "http://127.0.0.1:9/v1/chat/completions"
model = "gpt-x"
key_env = "SOME_KEY_VAR"

[[mock]]
path = "golden.json"
name = "gold"
"#,
    )
    .unwrap();
    let (reg, default) = load_providers(&path).unwrap();
    assert_eq!(default.as_deref(), Some("gold"));
    assert_eq!(reg.names(), vec!["gold".to_string(), "gpt".to_string()]);

    std::fs::write(&path, "default = \"missing\"\n").unwrap();
    assert!(load_providers(&path).is_err());
    std::fs::write(&path, "[[bogus]]\nx = 1\n").unwrap();
    assert!(load_providers(&path).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}

fn tempfile_dir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rtlrag-svc-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
