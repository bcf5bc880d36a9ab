//! HTTP facade over the engine.
//!
//! `POST /generate`, `POST /retrieve` and `GET /health`. Request bodies are
//! JSON; every error is `{"error": {"code", "message", "field"}}`.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use rtlrag::engine::{Engine, EngineError};
use rtlrag::llmclient::{ApiKey, GenerationConfig, LlmError, MockProvider, Profile, ProviderConfig, ProviderRegistry, RetryPolicy};
use rtlrag::promptgen::PromptError;
use rtlrag::retrieval::{RetrievalError, ScoredCandidate};
use rtlrag::embedding::EmbeddingError;
use rtlrag::RetrievalConfig;

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("missing environment variable {0}")]
    MissingEnv(&'static str),
    #[error("invalid value for {name}: {message}")]
    InvalidEnv { name: &'static str, message: String },
    #[error("provider file {path}: {message}")]
    Providers { path: String, message: String },
    #[error("engine failed to load: {0}")]
    Engine(#[from] EngineError),
    #[error("server i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Where the service reads its index, documents and providers from.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub index: PathBuf,
    pub documents: PathBuf,
    pub embedder: String,
    pub providers: Option<PathBuf>,
    pub bind: SocketAddr,
    pub max_in_flight: usize,
}

impl ServiceConfig {
    /// Reads `RTLRAG_INDEX`, `RTLRAG_DOCUMENTS` (required), `RTLRAG_PROVIDERS`,
    /// `RTLRAG_BIND`, `RTLRAG_EMBEDDER` and `RTLRAG_MAX_IN_FLIGHT`.
    pub fn from_env() -> Result<Self, ServiceError> {
        let var = |name: &'static str| std::env::var(name).ok().filter(|v| !v.is_empty());
        let index = var("RTLRAG_INDEX").ok_or(ServiceError::MissingEnv("RTLRAG_INDEX"))?;
        let documents = var("RTLRAG_DOCUMENTS").ok_or(ServiceError::MissingEnv("RTLRAG_DOCUMENTS"))?;
        let bind = var("RTLRAG_BIND")
            .unwrap_or_else(|| DEFAULT_BIND.into())
            .parse()
            .map_err(|e: std::net::AddrParseError| ServiceError::InvalidEnv {
                name: "RTLRAG_BIND",
                message: e.to_string(),
            })?;
        let max_in_flight = match var("RTLRAG_MAX_IN_FLIGHT") {
            None => DEFAULT_MAX_IN_FLIGHT,
            Some(v) => v.parse().ok().filter(|n| *n > 0).ok_or(ServiceError::InvalidEnv {
                name: "RTLRAG_MAX_IN_FLIGHT",
                message: format!("expected a positive integer, got `{v}`"),
            })?,
        };
        Ok(Self {
            index: index.into(),
            documents: documents.into(),
            embedder: var("RTLRAG_EMBEDDER").unwrap_or_else(|| "hashed".into()),
            providers: var("RTLRAG_PROVIDERS").map(PathBuf::from),
            bind,
            max_in_flight,
        })
    }
}

/// TOML provider table:
///
/// ```toml
/// default = "gpt"
///
/// [[http]]
/// name = "gpt"
/// endpoint = "https://api.openai.com/v1/chat/completions"
/// model = "gpt-4o"
/// key_env = "OPENAI_API_KEY"
///
/// [[mock]]
/// path = "mock_golden.json"
/// ```
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvidersFile {
    #[serde(default)]
    pub default: Option<String>,
    #[serde(default)]
    pub http: Vec<ProviderConfig>,
    #[serde(default)]
    pub mock: Vec<MockEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockEntry {
    /// Relative paths resolve against the provider file's directory.
    pub path: PathBuf,
    /// Overrides the name inside the mock file.
    #[serde(default)]
    pub name: Option<String>,
}

/// Builds the registry and default provider name from a provider file.
pub fn load_providers(path: &Path) -> Result<(ProviderRegistry, Option<String>), ServiceError> {
    let err = |message: String| ServiceError::Providers {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let file: ProvidersFile = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut registry = ProviderRegistry::new();
    for cfg in file.http {
        registry.add_http(cfg);
    }
    for entry in file.mock {
        let mock_path = base.join(&entry.path);
        let json = std::fs::read_to_string(&mock_path).map_err(|e| err(format!("{}: {e}", mock_path.display())))?;
        let mock = MockProvider::from_json(&json).map_err(|e| err(format!("{}: {e}", mock_path.display())))?;
        let name = entry
            .name
            .unwrap_or_else(|| rtlrag::llmclient::CompletionProvider::name(&mock).to_string());
        registry.add_shared(&name, Arc::new(mock));
    }
    if let Some(d) = &file.default {
        if !registry.contains(d) {
            return Err(err(format!("default provider `{d}` is not defined")));
        }
    }
    Ok((registry, file.default))
}

#[derive(Debug, Clone)]
pub struct StateOptions {
    pub default_provider: Option<String>,
    pub retry: RetryPolicy,
    /// Upper bound on provider calls in flight across all requests.
    pub max_in_flight: usize,
}

impl Default for StateOptions {
    fn default() -> Self {
        Self {
            default_provider: None,
            retry: RetryPolicy::default(),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

struct Inner {
    engine: OnceLock<Arc<Engine>>,
    providers: ProviderRegistry,
    provider_names: Vec<String>,
    opts: StateOptions,
    permits: Arc<Semaphore>,
}

/// Shared handler state. The engine slot is empty until loading finishes.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(providers: ProviderRegistry, opts: StateOptions) -> Self {
        let permits = Arc::new(Semaphore::new(opts.max_in_flight.max(1)));
        Self(Arc::new(Inner {
            engine: OnceLock::new(),
            provider_names: providers.names(),
            providers,
            opts,
            permits,
        }))
    }

    /// Returns false if an engine was already installed.
    pub fn install_engine(&self, engine: Arc<Engine>) -> bool {
        self.0.engine.set(engine).is_ok()
    }

    pub fn is_ready(&self) -> bool {
        self.0.engine.get().is_some()
    }

    fn engine(&self) -> Result<Arc<Engine>, ApiError> {
        self.0
            .engine
            .get()
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "not_ready", "index is still loading"))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/retrieve", post(retrieve))
        .route("/generate", post(generate))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    field: Option<&'static str>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            field: None,
        }
    }

    fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            field: Some(field),
            ..Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
        }
    }

    fn upstream(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_GATEWAY, "provider_failed", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message, "field": self.field}});
        (self.status, Json(body)).into_response()
    }
}

fn engine_error(e: EngineError) -> ApiError {
    match e {
        EngineError::Prompt(PromptError::EmptyQuery) | EngineError::Retrieval(RetrievalError::EmptyQuery) => {
            ApiError::invalid("query", "query must not be empty")
        }
        EngineError::Prompt(e @ PromptError::BudgetTooSmall { .. }) => ApiError::invalid("query", e.to_string()),
        EngineError::Retrieval(e @ RetrievalError::InvalidConfig(_)) => ApiError::invalid("retrieval", e.to_string()),
        EngineError::Llm(e @ LlmError::InvalidConfig(_)) => ApiError::invalid("generation", e.to_string()),
        EngineError::Llm(e) => ApiError::upstream(e.to_string()),
        EngineError::Prompt(e @ PromptError::EmptyResponse) => ApiError::upstream(e.to_string()),
        EngineError::Embedding(e @ EmbeddingError::Provider { .. })
        | EngineError::Retrieval(RetrievalError::Embed(e @ EmbeddingError::Provider { .. })) => {
            ApiError::upstream(e.to_string())
        }
        other => ApiError::internal(other.to_string()),
    }
}

/// Parses JSON by hand so every malformed body is a 400.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid("body", format!("malformed request body: {e}")))
}

fn require_query(q: &str) -> Result<(), ApiError> {
    if q.trim().is_empty() {
        return Err(ApiError::invalid("query", "query must not be empty"));
    }
    Ok(())
}

fn validate_retrieval(cfg: Option<RetrievalConfig>) -> Result<RetrievalConfig, ApiError> {
    let cfg = cfg.unwrap_or_default();
    cfg.validate().map_err(|e| ApiError::invalid("retrieval", e.to_string()))?;
    Ok(cfg)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerationOverrides {
    profile: Option<String>,
    temperature: Option<f64>,
    top_p: Option<f64>,
    max_new_tokens: Option<u32>,
}

impl GenerationOverrides {
    fn resolve(self) -> Result<GenerationConfig, ApiError> {
        let profile = match self.profile {
            Some(p) => p.parse::<Profile>().map_err(|e| ApiError::invalid("generation", e))?,
            None => Profile::default(),
        };
        let mut cfg = profile.config();
        cfg.temperature = self.temperature.unwrap_or(cfg.temperature);
        cfg.top_p = self.top_p.unwrap_or(cfg.top_p);
        cfg.max_new_tokens = self.max_new_tokens.unwrap_or(cfg.max_new_tokens);
        cfg.samples_n = 1;
        cfg.validate().map_err(|e| ApiError::invalid("generation", e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    query: String,
    #[serde(default)]
    provider: Option<String>,
    #[serde(default)]
    api_key: Option<ApiKey>,
    #[serde(default)]
    retrieval: Option<RetrievalConfig>,
    #[serde(default)]
    generation: Option<GenerationOverrides>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrieveRequest {
    query: String,
    #[serde(default)]
    retrieval: Option<RetrievalConfig>,
}

#[derive(Serialize)]
struct RetrievedItem<'a> {
    doc_id: &'a str,
    module_name: Option<&'a str>,
    relevance: f64,
    distance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    evicted: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
}

fn item<'a>(c: &'a ScoredCandidate, evicted: Option<bool>, with_text: bool) -> RetrievedItem<'a> {
    RetrievedItem {
        doc_id: &c.doc_id,
        module_name: c.document.module_name(),
        relevance: c.relevance,
        distance: c.distance,
        evicted,
        text: with_text.then_some(c.document.text.as_str()),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

async fn health(State(state): State<AppState>) -> Response {
    match state.0.engine.get() {
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({"status": "loading", "providers": state.0.provider_names})),
        )
            .into_response(),
        Some(engine) => Json(json!({
            "status": "ok",
            "index_size": engine.knowledge_base().len(),
            "dim": engine.knowledge_base().index().dim(),
            "embedder": engine.embedder().name(),
            "providers": state.0.provider_names,
        }))
        .into_response(),
    }
}

async fn retrieve(State(state): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let engine = state.engine()?;
    let req: RetrieveRequest = parse_body(&body)?;
    require_query(&req.query)?;
    let rcfg = validate_retrieval(req.retrieval)?;
    let t = Instant::now();
    let outcome = blocking(move || engine.retrieve(&req.query, &rcfg))
        .await?
        .map_err(engine_error)?;
    let retrieval_ms = t.elapsed().as_secs_f64() * 1e3;
    tracing::info!(selected = outcome.selected.len(), pool = outcome.pool.len(), "retrieve");
    let selected: Vec<_> = outcome.selected.iter().map(|c| item(c, None, true)).collect();
    let pool: Vec<_> = outcome.pool.iter().map(|c| item(c, None, false)).collect();
    Ok(Json(json!({
        "retrieved": selected,
        "pool": pool,
        "trace": outcome.trace,
        "timings": {"retrieval_ms": retrieval_ms},
    })))
}

async fn generate(State(state): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let engine = state.engine()?;
    let req: GenerateRequest = parse_body(&body)?;
    require_query(&req.query)?;
    let rcfg = validate_retrieval(req.retrieval)?;
    let gcfg = req.generation.unwrap_or_default().resolve()?;
    let name = req
        .provider
        .or_else(|| state.0.opts.default_provider.clone())
        .ok_or_else(|| ApiError::invalid("provider", "no provider given and no default configured"))?;
    let provider = state
        .0
        .providers
        .resolve(&name, req.api_key)
        .ok_or_else(|| ApiError::invalid("provider", format!("unknown provider `{name}`")))?;
    let permit = state
        .0
        .permits
        .clone()
        .acquire_owned()
        .await
        .map_err(|_| ApiError::internal("generation pool closed"))?;
    let retry = state.0.opts.retry;
    let query = req.query;
    let run = blocking(move || {
        let _permit = permit;
        engine.generate(provider.as_ref(), &query, &rcfg, &gcfg, &retry)
    })
    .await?;
    let run = match run {
        Ok(run) => run,
        Err(e) => {
            let err = engine_error(e);
            tracing::warn!(provider = %name, status = err.status.as_u16(), "generation failed: {}", err.message);
            return Err(err);
        }
    };
    tracing::info!(
        provider = %name,
        selected = run.retrieval.selected.len(),
        attempts = run.completion.attempts,
        generation_ms = run.timings.generation_ms,
        "generate"
    );
    let retrieved: Vec<_> = run
        .retrieval
        .selected
        .iter()
        .map(|c| item(c, Some(run.prompt.evicted.contains(&c.doc_id)), false))
        .collect();
    Ok(Json(json!({
        "code": run.extraction.code,
        "extraction": {"source": run.extraction.source, "warnings": run.extraction.warnings},
        "prompt_warnings": run.prompt.warnings,
        "retrieved": retrieved,
        "trace": run.retrieval.trace,
        "timings": run.timings,
        "provider": name,
        "attempts": run.completion.attempts,
    })))
}

/// Binds, starts loading the engine in the background and serves until
/// Ctrl-C. Requests before the engine is ready get 503.
pub async fn serve(cfg: ServiceConfig) -> Result<(), ServiceError> {
    let (registry, default_provider) = match &cfg.providers {
        Some(p) => load_providers(p)?,
        None => (ProviderRegistry::new(), None),
    };
    let state = AppState::new(
        registry,
        StateOptions {
            default_provider,
            max_in_flight: cfg.max_in_flight,
            ..Default::default()
        },
    );
    let listener = tokio::net::TcpListener::bind(cfg.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");

    let loader_state = state.clone();
    let loader = async move {
        let started = Instant::now();
        let result = tokio::task::spawn_blocking(move || Engine::load(&cfg.index, &cfg.documents, &cfg.embedder))
            .await
            .expect("engine loader panicked");
        match result {
            Ok(engine) => {
                tracing::info!(
                    documents = engine.knowledge_base().len(),
                    ms = started.elapsed().as_millis() as u64,
                    "engine ready"
                );
                loader_state.install_engine(Arc::new(engine));
                std::future::pending::<Result<(), ServiceError>>().await
            }
            Err(e) => Err(ServiceError::Engine(e)),
        }
    };
    let server = axum::serve(listener, router(state)).with_graceful_shutdown(async {
        let _ = tokio::signal::ctrl_c().await;
    });
    tokio::select! {
        r = server => Ok(r?),
        r = loader => r,
    }
}
