//! Completion-provider contract, retrying client, HTTP adapter and mock provider.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::promptgen::AugmentedPrompt;

pub const DEFAULT_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
    pub samples_n: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Profile::Benchmark.config()
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        let bad = |m: String| Err(LlmError::InvalidConfig(m));
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.top_p) {
            return bad(format!("top_p must be within [0, 1], got {}", self.top_p));
        }
        if self.max_new_tokens < 1 {
            return bad("max_new_tokens must be at least 1".into());
        }
        if self.samples_n < 1 {
            return bad("samples_n must be at least 1".into());
        }
        Ok(())
    }
}

/// Named sampling presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// temperature 0.8, top-p 0.95, 1500 new tokens
    #[default]
    Benchmark,
    /// temperature 0.2, used for strict pass@1 columns
    Pass1Strict,
    /// temperature 1.0, top-p 0.95, 10000 new tokens for large hierarchical designs
    CaseStudy,
}

impl Profile {
    pub fn config(self) -> GenerationConfig {
        let (temperature, top_p, max_new_tokens) = match self {
            Profile::Benchmark => (0.8, 0.95, 1500),
            Profile::Pass1Strict => (0.2, 0.95, 1500),
            Profile::CaseStudy => (1.0, 0.95, 10_000),
        };
        GenerationConfig {
            temperature,
            top_p,
            max_new_tokens,
            samples_n: DEFAULT_SAMPLES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Benchmark => "benchmark",
            Profile::Pass1Strict => "pass1-strict",
            Profile::CaseStudy => "case-study",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "benchmark" => Ok(Profile::Benchmark),
            "pass1-strict" => Ok(Profile::Pass1Strict),
            "case-study" => Ok(Profile::CaseStudy),
            _ => Err(format!("unknown profile `{s}` (benchmark, pass1-strict, case-study)")),
        }
    }
}

/// How a provider wants the prompt delivered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStyle {
    /// Separate system and user turns.
    #[default]
    Chat,
    /// One concatenated text.
    Completion,
}

#[derive(Debug, Clone)]
pub struct CompletionRequest<'a> {
    /// Empty for completion-style providers.
    pub system: &'a str,
    pub user: &'a str,
    pub config: &'a GenerationConfig,
    pub sample_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    /// Network or server-side trouble; worth retrying.
    #[error("transport failure: {0}")]
    Transport(String),
    /// The provider answered but declined; retrying would not help.
    #[error("provider refused: {0}")]
    Refused(String),
}

pub trait CompletionProvider: Send + Sync {
    fn name(&self) -> &str;

    fn style(&self) -> PromptStyle {
        PromptStyle::Chat
    }

    /// Upper bound on concurrent calls this provider tolerates.
    fn max_concurrency(&self) -> usize {
        4
    }

    /// Returns the raw completion text.
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum LlmError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("provider `{provider}` unreachable after {attempts} attempts: {message}")]
    Transport {
        provider: String,
        message: String,
        attempts: u32,
    },
    #[error("provider `{provider}` refused the request: {message}")]
    Refused { provider: String, message: String },
    #[error("all {} samples failed; first failure: {}", .0.len(), .0.first().map(String::as_str).unwrap_or(""))]
    AllSamplesFailed(Vec<String>),
}

/// Retries transport failures only, with exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay() -> Self {
        Self {
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
            ..Self::default()
        }
    }

    /// Delay before attempt `attempt + 1`, where `attempt` counts from 1.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
    pub elapsed_ms: u64,
}

impl Completion {
    pub fn retries(&self) -> u32 {
        self.attempts - 1
    }
}

fn payload(provider: &dyn CompletionProvider, prompt: &AugmentedPrompt) -> (String, String) {
    match provider.style() {
        PromptStyle::Chat => (prompt.system_text.clone(), prompt.user_payload()),
        PromptStyle::Completion => (String::new(), prompt.render_single()),
    }
}

fn generate_one(
    provider: &dyn CompletionProvider,
    system: &str,
    user: &str,
    cfg: &GenerationConfig,
    sample_index: usize,
    policy: &RetryPolicy,
) -> Result<Completion, LlmError> {
    let start = Instant::now();
    let request = CompletionRequest {
        system,
        user,
        config: cfg,
        sample_index,
    };
    let max_attempts = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match provider.complete(&request) {
            Ok(text) => {
                let elapsed_ms = start.elapsed().as_millis() as u64;
                tracing::info!(
                    provider = provider.name(),
                    sample = sample_index,
                    attempts = attempt,
                    retries = attempt - 1,
                    elapsed_ms,
                    prompt_chars = system.len() + user.len(),
                    response_chars = text.len(),
                    "completion received"
                );
                tracing::trace!(provider = provider.name(), sample = sample_index, response = %text);
                return Ok(Completion {
                    text,
                    attempts: attempt,
                    elapsed_ms,
                });
            }
            Err(ProviderError::Refused(message)) => {
                tracing::warn!(provider = provider.name(), sample = sample_index, %message, "provider refused");
                return Err(LlmError::Refused {
                    provider: provider.name().to_string(),
                    message,
                });
            }
            Err(ProviderError::Transport(message)) => {
                if attempt >= max_attempts {
                    tracing::warn!(
                        provider = provider.name(),
                        sample = sample_index,
                        attempts = attempt,
                        %message,
                        "giving up after transport failures"
                    );
                    return Err(LlmError::Transport {
                        provider: provider.name().to_string(),
                        message,
                        attempts: attempt,
                    });
                }
                let delay = policy.delay_after(attempt);
                tracing::warn!(
                    provider = provider.name(),
                    sample = sample_index,
                    attempt,
                    delay_ms = delay.as_millis() as u64,
                    %message,
                    "transport failure, retrying"
                );
                std::thread::sleep(delay);
                attempt += 1;
            }
        }
    }
}

/// Sends the prompt once. The response text is returned verbatim.
pub fn generate(
    provider: &dyn CompletionProvider,
    prompt: &AugmentedPrompt,
    cfg: &GenerationConfig,
    policy: &RetryPolicy,
) -> Result<Completion, LlmError> {
    cfg.validate()?;
    let (system, user) = payload(provider, prompt);
    generate_one(provider, &system, &user, cfg, 0, policy)
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    /// One entry per sample index.
    pub samples: Vec<Result<Completion, LlmError>>,
}

impl BatchOutcome {
    pub fn successes(&self) -> usize {
        self.samples.iter().filter(|s| s.is_ok()).count()
    }

    pub fn failures(&self) -> usize {
        self.samples.len() - self.successes()
    }
}

/// Runs `cfg.samples_n` independent generations, at most `parallelism` at a time.
///
/// Individual failures are kept in place; the call only fails when every
/// sample failed.
pub fn generate_batch(
    provider: &dyn CompletionProvider,
    prompt: &AugmentedPrompt,
    cfg: &GenerationConfig,
    policy: &RetryPolicy,
    parallelism: usize,
) -> Result<BatchOutcome, LlmError> {
    cfg.validate()?;
    let (system, user) = payload(provider, prompt);
    let n = cfg.samples_n;
    let workers = parallelism.max(1).min(provider.max_concurrency().max(1)).min(n);
    let slots: Vec<Mutex<Option<Result<Completion, LlmError>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let result = generate_one(provider, &system, &user, cfg, i, policy);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    let samples: Vec<_> = slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every sample slot is filled"))
        .collect();
    if samples.iter().all(|s| s.is_err()) {
        return Err(LlmError::AllSamplesFailed(
            samples
                .into_iter()
                .filter_map(|s| s.err())
                .map(|e| e.to_string())
                .collect(),
        ));
    }
    Ok(BatchOutcome { samples })
}

/// A credential held for one session or request. Never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(key: impl Into<String>) -> Self {
        Self(key.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(<redacted>)")
    }
}

impl<'de> Deserialize<'de> for ApiKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d).map(ApiKey)
    }
}

fn default_auth_header() -> String {
    "Authorization".into()
}

fn default_concurrency() -> usize {
    4
}

/// Configuration of an HTTP completion adapter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub name: String,
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    /// Environment variable the key is read from when no session key is given.
    #[serde(default)]
    pub key_env: Option<String>,
    #[serde(default)]
    pub style: PromptStyle,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub timeout_s: Option<u64>,
}

impl ProviderConfig {
    /// An OpenAI-compatible chat endpoint for `model`.
    pub fn openai(model: &str) -> Self {
        Self {
            name: format!("openai:{model}"),
            endpoint: std::env::var("RTLRAG_LLM_ENDPOINT")
                .unwrap_or_else(|_| "https://api.openai.com/v1/chat/completions".into()),
            model: model.to_string(),
            auth_header: default_auth_header(),
            key_env: Some("OPENAI_API_KEY".into()),
            style: PromptStyle::Chat,
            max_concurrency: default_concurrency(),
            timeout_s: None,
        }
    }

    /// Builds the adapter. A session key takes precedence over `key_env`.
    pub fn build(&self, session_key: Option<ApiKey>) -> HttpProvider {
        let key = session_key.or_else(|| {
            self.key_env
                .as_ref()
                .and_then(|var| std::env::var(var).ok())
                .filter(|k| !k.is_empty())
                .map(ApiKey)
        });
        HttpProvider::new(self.clone(), key)
    }
}

/// Thin adapter over OpenAI-style chat or completion endpoints.
pub struct HttpProvider {
    config: ProviderConfig,
    key: Option<ApiKey>,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(config: ProviderConfig, key: Option<ApiKey>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s.unwrap_or(300))))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, key, agent }
    }

    fn body(&self, request: &CompletionRequest<'_>) -> Value {
        let cfg = request.config;
        match self.config.style {
            PromptStyle::Chat => json!({
                "model": self.config.model,
                "messages": [
                    {"role": "system", "content": request.system},
                    {"role": "user", "content": request.user},
                ],
                "temperature": cfg.temperature,
                "top_p": cfg.top_p,
                "max_tokens": cfg.max_new_tokens,
            }),
            PromptStyle::Completion => json!({
                "model": self.config.model,
                "prompt": request.user,
                "temperature": cfg.temperature,
                "top_p": cfg.top_p,
                "max_tokens": cfg.max_new_tokens,
            }),
        }
    }
}

fn error_message(body: &Value) -> String {
    body.pointer("/error/message")
        .and_then(Value::as_str)
        .map(str::to_string)
        .unwrap_or_else(|| body.to_string())
}

/// Pulls the completion text out of an OpenAI-style response body.
pub fn parse_completion_body(body: &Value, style: PromptStyle) -> Result<String, ProviderError> {
    let choice = body
        .pointer("/choices/0")
        .ok_or_else(|| ProviderError::Refused(format!("response has no choices: {}", error_message(body))))?;
    if choice.get("finish_reason").and_then(Value::as_str) == Some("content_filter") {
        return Err(ProviderError::Refused("response blocked by content filter".into()));
    }
    if let Some(refusal) = choice.pointer("/message/refusal").and_then(Value::as_str) {
        return Err(ProviderError::Refused(refusal.to_string()));
    }
    let text = match style {
        PromptStyle::Chat => choice.pointer("/message/content"),
        PromptStyle::Completion => choice.get("text"),
    };
    text.and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ProviderError::Refused("response choice carries no text".into()))
}

impl CompletionProvider for HttpProvider {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn style(&self) -> PromptStyle {
        self.config.style
    }

    fn max_concurrency(&self) -> usize {
        self.config.max_concurrency
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.key {
            let value = if self.config.auth_header.eq_ignore_ascii_case("authorization") {
                format!("Bearer {}", key.expose())
            } else {
                key.expose().to_string()
            };
            req = req.header(self.config.auth_header.as_str(), value);
        }
        let mut response = req
            .send_json(self.body(request))
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let body: Value = response
            .body_mut()
            .read_json()
            .unwrap_or_else(|e| json!({"error": {"message": format!("unreadable body: {e}")}}));
        match status {
            200..=299 => parse_completion_body(&body, self.config.style),
            408 | 429 | 500..=599 => Err(ProviderError::Transport(format!(
                "HTTP {status}: {}",
                error_message(&body)
            ))),
            _ => Err(ProviderError::Refused(format!("HTTP {status}: {}", error_message(&body)))),
        }
    }
}

/// What a mock returns for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockOutput {
    Text(String),
    TransportError { transport_error: String },
    Refusal { refusal: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    /// Substring looked for in the request section of the user turn.
    #[serde(rename = "match")]
    pub pattern: String,
    /// Sample `i` gets `outputs[i % outputs.len()]`.
    pub outputs: Vec<MockOutput>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockSpec {
    #[serde(default = "default_mock_name")]
    pub name: String,
    #[serde(default)]
    pub responses: Vec<MockRule>,
    #[serde(default)]
    pub default: Vec<MockOutput>,
    /// The first `fail_first` calls fail with a transport error.
    #[serde(default)]
    pub fail_first: usize,
}

fn default_mock_name() -> String {
    "mock".into()
}

/// Deterministic offline provider driven by canned outputs.
#[derive(Debug)]
pub struct MockProvider {
    spec: MockSpec,
    calls: AtomicUsize,
}

const REQUEST_MARKER: &str = "Design request:\n";

impl MockProvider {
    pub fn new(spec: MockSpec) -> Self {
        Self {
            spec,
            calls: AtomicUsize::new(0),
        }
    }

    /// Always answers `text`.
    pub fn constant(name: &str, text: &str) -> Self {
        Self::new(MockSpec {
            name: name.to_string(),
            default: vec![MockOutput::Text(text.to_string())],
            ..Default::default()
        })
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text).map(Self::new)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl CompletionProvider for MockProvider {
    fn name(&self) -> &str {
        &self.spec.name
    }

    fn max_concurrency(&self) -> usize {
        16
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        if call < self.spec.fail_first {
            return Err(ProviderError::Transport(format!("simulated timeout on call {}", call + 1)));
        }
        let haystack = request
            .user
            .rfind(REQUEST_MARKER)
            .map_or(request.user, |i| &request.user[i + REQUEST_MARKER.len()..]);
        let outputs = self
            .spec
            .responses
            .iter()
            .find(|r| haystack.contains(&r.pattern))
            .map_or(&self.spec.default, |r| &r.outputs);
        if outputs.is_empty() {
            return Err(ProviderError::Refused("mock has no canned output for this request".into()));
        }
        match &outputs[request.sample_index % outputs.len()] {
            MockOutput::Text(t) => Ok(t.clone()),
            MockOutput::TransportError { transport_error } => Err(ProviderError::Transport(transport_error.clone())),
            MockOutput::Refusal { refusal } => Err(ProviderError::Refused(refusal.clone())),
        }
    }
}

/// Named provider factories; each build receives the request's session key.
#[derive(Default)]
pub struct ProviderRegistry {
    entries: BTreeMap<String, RegistryEntry>,
}

enum RegistryEntry {
    Http(ProviderConfig),
    Shared(std::sync::Arc<dyn CompletionProvider>),
}

impl ProviderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_http(&mut self, config: ProviderConfig) {
        self.entries.insert(config.name.clone(), RegistryEntry::Http(config));
    }

    pub fn add_shared(&mut self, name: &str, provider: std::sync::Arc<dyn CompletionProvider>) {
        self.entries.insert(name.to_string(), RegistryEntry::Shared(provider));
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn resolve(
        &self,
        name: &str,
        session_key: Option<ApiKey>,
    ) -> Option<std::sync::Arc<dyn CompletionProvider>> {
        match self.entries.get(name)? {
            RegistryEntry::Http(cfg) => Some(std::sync::Arc::new(cfg.build(session_key))),
            RegistryEntry::Shared(p) => Some(p.clone()),
        }
    }
}

/// Resolves `mock:PATH` (a [`MockSpec`] JSON file) or `openai:MODEL`.
pub fn provider_from_spec(
    spec: &str,
    session_key: Option<ApiKey>,
) -> Result<std::sync::Arc<dyn CompletionProvider>, LlmError> {
    let (kind, arg) = spec
        .split_once(':')
        .ok_or_else(|| LlmError::InvalidConfig(format!("provider `{spec}` must look like mock:PATH or openai:MODEL")))?;
    match kind {
        "mock" => {
            let text = std::fs::read_to_string(arg)
                .map_err(|e| LlmError::InvalidConfig(format!("cannot read mock file {arg}: {e}")))?;
            let mock = MockProvider::from_json(&text)
                .map_err(|e| LlmError::InvalidConfig(format!("bad mock file {arg}: {e}")))?;
            Ok(std::sync::Arc::new(mock))
        }
        "openai" if !arg.is_empty() => Ok(std::sync::Arc::new(ProviderConfig::openai(arg).build(session_key))),
        _ => Err(LlmError::InvalidConfig(format!("unknown provider `{spec}`"))),
    }
}
