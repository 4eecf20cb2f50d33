//! Completion requests against an inference endpoint.
//!
//! A [`Gateway`] pairs an [`EndpointProfile`] with a [`Backend`] (HTTP or
//! mock), runs requests with bounded parallelism and retries, and optionally
//! consults a persistent [`CacheStore`] so long annotation sweeps can resume.

mod cache;
mod http;
mod mock;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheEntry, CacheKeyFields, CacheStore};
pub use http::HttpBackend;
pub use mock::{extract_self_evaluation, extract_target_question, GreedyPolicy, AnswerDistribution, KnowledgeTable, MockBackend};

/// Connection and retry settings for one inference endpoint.
///
/// The auth token itself is never stored here, only the name of the
/// environment variable that holds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointProfile {
    pub name: String,
    pub base_url: String,
    pub model_id: String,
    pub auth_token_ref: String,
    /// Seconds.
    pub request_timeout: f64,
    pub max_parallel: usize,
    pub max_retries: u32,
    /// Seconds; doubled on every retry, with jitter.
    pub backoff_base: f64,
}

impl EndpointProfile {
    /// Profile for an in-process mock backend.
    pub fn mock() -> Self {
        Self {
            name: "mock".into(),
            base_url: "mock://local".into(),
            model_id: "mock".into(),
            auth_token_ref: "KPROBE_API_TOKEN".into(),
            request_timeout: 30.0,
            max_parallel: 8,
            max_retries: 3,
            backoff_base: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_parallel == 0 {
            return Err(GatewayError::InvalidProfile("max_parallel must be >= 1".into()));
        }
        if !(self.request_timeout > 0.0) {
            return Err(GatewayError::InvalidProfile("request_timeout must be > 0".into()));
        }
        if !(self.backoff_base >= 0.0) {
            return Err(GatewayError::InvalidProfile("backoff_base must be >= 0".into()));
        }
        Ok(())
    }
}

/// Top-k truncation for sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopK {
    Limited(u32),
    Unbounded,
}

impl TopK {
    pub fn as_option(self) -> Option<u32> {
        match self {
            TopK::Limited(k) => Some(k),
            TopK::Unbounded => None,
        }
    }
}

impl std::fmt::Display for TopK {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TopK::Limited(k) => write!(f, "{k}"),
            TopK::Unbounded => f.write_str("unbounded"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub top_k: TopK,
    pub n_samples: u32,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl CompletionRequest {
    /// Single greedy (T=0) completion.
    pub fn greedy(prompt: impl Into<String>, max_tokens: u32) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: 0.0,
            top_k: TopK::Unbounded,
            n_samples: 1,
            max_tokens,
            seed: None,
        }
    }

    /// `n` samples at T=0.5 from the top 40 tokens.
    pub fn sampled(prompt: impl Into<String>, n: u32, max_tokens: u32) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: 0.5,
            top_k: TopK::Limited(40),
            n_samples: n,
            max_tokens,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return bad("temperature must be a finite non-negative number");
        }
        if self.n_samples == 0 {
            return bad("n_samples must be >= 1");
        }
        if self.temperature == 0.0 && self.n_samples != 1 {
            return bad("greedy decoding (temperature 0) requires n_samples = 1");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be >= 1");
        }
        if self.top_k == TopK::Limited(0) {
            return bad("top_k must be >= 1");
        }
        Ok(())
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub texts: Vec<String>,
    pub attempts_used: u32,
    pub from_cache: bool,
    pub backend_id: String,
}

/// Failure reported by a backend for a single attempt.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("HTTP status {0}")]
    Status(u16),
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl BackendError {
    /// Timeouts, 5xx, 429 and dropped connections are worth another attempt.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::Connect(_) => true,
            BackendError::Status(code) => *code == 429 || (500..600).contains(code),
            BackendError::Auth(_) | BackendError::Malformed(_) => false,
        }
    }
}

/// Something that turns a prompt into completions.
pub trait Backend: Send + Sync {
    fn backend_id(&self) -> &str;

    /// Produces the raw completions for one attempt. Implementations may
    /// return more text than the stop condition allows; the gateway trims it.
    fn generate(&self, request: &CompletionRequest) -> Result<Vec<String>, BackendError>;
}

/// Backend driven by a closure, handy for scripted outcomes and fault
/// injection.
pub struct FnBackend<F> {
    id: String,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<Vec<String>, BackendError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        Self { id: id.into(), f }
    }
}

impl<F> Backend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<Vec<String>, BackendError> + Send + Sync,
{
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        (self.f)(request)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("invalid endpoint profile: {0}")]
    InvalidProfile(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("authentication failed for request {key}: {message}")]
    Auth { key: String, message: String },
    #[error("transport failure for request {key} after {attempts} attempts: {message}")]
    Transport { key: String, attempts: u32, message: String },
    #[error("malformed response for request {key}: {message}")]
    MalformedResponse { key: String, message: String },
    #[error("cache I/O failure for request {key}: {message}")]
    CacheIo { key: String, message: String },
    #[error("invalid answer distribution: {0}")]
    InvalidDistribution(String),
}

impl GatewayError {
    pub fn kind(&self) -> &'static str {
        match self {
            GatewayError::InvalidProfile(_) => "InvalidProfile",
            GatewayError::InvalidRequest(_) => "InvalidRequest",
            GatewayError::EmptyBatch => "EmptyBatch",
            GatewayError::Auth { .. } => "AuthError",
            GatewayError::Transport { .. } => "TransportError",
            GatewayError::MalformedResponse { .. } => "MalformedResponse",
            GatewayError::CacheIo { .. } => "CacheIo",
            GatewayError::InvalidDistribution(_) => "InvalidDistribution",
        }
    }
}

/// Aggregate report for a batch in which some positions failed.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("{} of {total} requests failed (positions {positions:?})", failures.len(), positions = self.positions())]
pub struct BatchError {
    pub total: usize,
    pub failures: Vec<(usize, GatewayError)>,
}

impl BatchError {
    pub fn positions(&self) -> Vec<usize> {
        self.failures.iter().map(|(i, _)| *i).collect()
    }
}

/// Per-position outcomes of [`Gateway::complete_batch`].
#[derive(Debug)]
pub struct BatchOutcome {
    pub results: Vec<Result<CompletionResult, GatewayError>>,
}

impl BatchOutcome {
    pub fn into_all(self) -> Result<Vec<CompletionResult>, BatchError> {
        let total = self.results.len();
        let mut ok = Vec::with_capacity(total);
        let mut failures = Vec::new();
        for (i, r) in self.results.into_iter().enumerate() {
            match r {
                Ok(v) => ok.push(v),
                Err(e) => failures.push((i, e)),
            }
        }
        if failures.is_empty() {
            Ok(ok)
        } else {
            Err(BatchError { total, failures })
        }
    }
}

/// Counters for backend traffic issued through a gateway.
#[derive(Debug, Default)]
pub struct GatewayStats {
    backend_calls: AtomicUsize,
    generations: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl GatewayStats {
    /// Attempts sent to the backend, including retries.
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    /// Completions requested from the backend (sum of `n_samples` over calls).
    pub fn generations(&self) -> usize {
        self.generations.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }
}

pub struct Gateway {
    profile: EndpointProfile,
    backend: Arc<dyn Backend>,
    cache: Option<CacheStore>,
    stats: GatewayStats,
}

impl Gateway {
    pub fn new(profile: EndpointProfile, backend: Arc<dyn Backend>) -> Result<Self, GatewayError> {
        profile.validate()?;
        Ok(Self {
            profile,
            backend,
            cache: None,
            stats: GatewayStats::default(),
        })
    }

    /// Routes [`Gateway::complete_batch`] through `cache`.
    pub fn with_cache(mut self, cache: CacheStore) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn profile(&self) -> &EndpointProfile {
        &self.profile
    }

    pub fn backend_id(&self) -> &str {
        self.backend.backend_id()
    }

    pub fn cache(&self) -> Option<&CacheStore> {
        self.cache.as_ref()
    }

    pub fn stats(&self) -> &GatewayStats {
        &self.stats
    }

    pub fn key_fields(&self, request: &CompletionRequest) -> CacheKeyFields {
        CacheKeyFields::new(self.backend.backend_id(), &self.profile.model_id, request)
    }

    /// Runs one request against the backend, retrying transient failures.
    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        request.validate()?;
        let key = self.key_fields(request).short_digest();
        let mut attempt: u32 = 0;
        loop {
            attempt += 1;
            self.stats.backend_calls.fetch_add(1, Ordering::SeqCst);
            self.stats
                .generations
                .fetch_add(request.n_samples as usize, Ordering::SeqCst);
            match self.backend.generate(request) {
                Ok(raw) => {
                    if raw.len() != request.n_samples as usize {
                        return Err(GatewayError::MalformedResponse {
                            key,
                            message: format!(
                                "expected {} texts, got {}",
                                request.n_samples,
                                raw.len()
                            ),
                        });
                    }
                    let texts = raw
                        .into_iter()
                        .map(|t| apply_stop_condition(&t, request.max_tokens))
                        .collect();
                    return Ok(CompletionResult {
                        texts,
                        attempts_used: attempt,
                        from_cache: false,
                        backend_id: self.backend.backend_id().to_string(),
                    });
                }
                Err(BackendError::Auth(message)) => return Err(GatewayError::Auth { key, message }),
                Err(BackendError::Malformed(message)) => {
                    return Err(GatewayError::MalformedResponse { key, message })
                }
                Err(e) if e.is_transient() && attempt <= self.profile.max_retries => {
                    log::debug!("request {key}: attempt {attempt} failed ({e}), retrying");
                    self.backoff(attempt);
                }
                Err(e) => {
                    return Err(GatewayError::Transport {
                        key,
                        attempts: attempt,
                        message: e.to_string(),
                    })
                }
            }
        }
    }

    fn backoff(&self, attempt: u32) {
        if self.profile.backoff_base <= 0.0 {
            return;
        }
        let exp = self.profile.backoff_base * 2f64.powi(attempt.saturating_sub(1) as i32);
        let jitter: f64 = rand::thread_rng().gen_range(0.5..1.5);
        std::thread::sleep(Duration::from_secs_f64(exp * jitter));
    }

    /// Cache-first variant of [`Gateway::complete`]. A hit issues no backend
    /// call; a miss stores the fresh result before returning it.
    pub fn cached_complete(
        &self,
        cache: &CacheStore,
        request: &CompletionRequest,
    ) -> Result<CompletionResult, GatewayError> {
        request.validate()?;
        let fields = self.key_fields(request);
        match cache.get(&fields) {
            Ok(Some(texts)) => {
                self.stats.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(CompletionResult {
                    texts,
                    attempts_used: 0,
                    from_cache: true,
                    backend_id: self.backend.backend_id().to_string(),
                });
            }
            Ok(None) => {}
            Err(corrupt) => {
                log::warn!("{corrupt}; discarding entry and re-querying");
                cache.remove(&fields);
            }
        }
        let result = self.complete(request)?;
        cache
            .put(&fields, &result.texts)
            .map_err(|e| GatewayError::CacheIo {
                key: fields.short_digest(),
                message: e.to_string(),
            })?;
        Ok(result)
    }

    fn complete_one(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        match &self.cache {
            Some(cache) => self.cached_complete(cache, request),
            None => self.complete(request),
        }
    }

    /// Runs `requests` with at most `max_parallel` in flight. Results keep the
    /// input order; individual failures do not abort the batch.
    pub fn complete_batch(&self, requests: &[CompletionRequest]) -> Result<BatchOutcome, GatewayError> {
        if requests.is_empty() {
            return Err(GatewayError::EmptyBatch);
        }
        let workers = self.profile.max_parallel.min(requests.len());
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<CompletionResult, GatewayError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= requests.len() {
                        break;
                    }
                    let r = self.complete_one(&requests[i]);
                    *slots[i].lock().expect("slot poisoned") = Some(r);
                });
            }
        });
        let results = slots
            .into_iter()
            .map(|s| s.into_inner().expect("slot poisoned").expect("every slot filled"))
            .collect();
        Ok(BatchOutcome { results })
    }
}

/// Cuts a completion at the first newline, then at `max_tokens`
/// whitespace-delimited tokens.
pub fn apply_stop_condition(text: &str, max_tokens: u32) -> String {
    let line = text.split('\n').next().unwrap_or("");
    let mut seen = 0u32;
    let mut in_token = false;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() {
            in_token = false;
        } else if !in_token {
            in_token = true;
            seen += 1;
            if seen > max_tokens {
                return line[..i].to_string();
            }
        }
    }
    line.to_string()
}
