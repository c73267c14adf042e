//! Access to the three model roles (scorer, optimizer, embedder).
//!
//! A [`Gateway`] binds each role to a [`Backend`] and a model id and adds
//! response caching, retries with exponential backoff, rate limiting and an
//! optional JSONL transcript. Backends are either HTTP adapters described
//! by configuration ([`http::ProviderAdapter`]), the deterministic
//! [`mock::MockOracle`], or a [`transcript::ReplayBackend`].

pub mod cache;
pub mod http;
pub mod mock;
pub mod transcript;

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::digest_parts;
pub use cache::{EmbeddingCache, ResponseCache};
pub use transcript::{Clock, Transcript, TranscriptRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    /// Retryable failure; surfaced as `Provider` once the retry budget is spent.
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("provider error after {attempts} attempt(s): {message}")]
    Provider { attempts: u32, message: String },
    #[error("provider rejected the request (status {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("empty input")]
    EmptyInput,
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("no recorded response for request {0}")]
    NotRecorded(String),
    #[error("gateway I/O error: {0}")]
    Io(String),
    #[error("invalid adapter configuration: {0}")]
    Config(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transient(_) | GatewayError::Timeout(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Score,
    Optimize,
    Embed,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Score => "score",
            Role::Optimize => "optimize",
            Role::Embed => "embed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decode {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Decode {
    /// Scoring is greedy; optimizing samples at 0.7.
    pub fn for_role(role: Role) -> Self {
        match role {
            Role::Score => Decode {
                temperature: 0.0,
                max_tokens: 64,
            },
            Role::Optimize => Decode {
                temperature: 0.7,
                max_tokens: 512,
            },
            Role::Embed => Decode {
                temperature: 0.0,
                max_tokens: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub role: Role,
    pub model_id: String,
    pub prompt: String,
    pub decode: Decode,
}

impl LlmRequest {
    pub fn new(role: Role, model_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            role,
            model_id: model_id.into(),
            prompt: prompt.into(),
            decode: Decode::for_role(role),
        }
    }

    /// Digest of everything that determines the response.
    pub fn digest(&self) -> String {
        digest_parts([
            self.role.as_str().as_bytes(),
            self.model_id.as_bytes(),
            self.prompt.as_bytes(),
            format!("{:?}", self.decode.temperature).as_bytes(),
            self.decode.max_tokens.to_string().as_bytes(),
        ])
    }
}

/// A raw provider. Implementations do no caching or retrying of their own.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, req: &LlmRequest) -> Result<String, GatewayError>;
    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            initial_backoff_ms: 500,
            multiplier: 2.0,
            max_backoff_ms: 20_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_wait(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            initial_backoff_ms: 0,
            ..Self::default()
        }
    }

    /// Delay before attempt `attempt + 1` (attempts count from 1).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(attempt.saturating_sub(1) as i32);
        Duration::from_millis(ms.min(self.max_backoff_ms as f64) as u64)
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// attempt budget is spent.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        let max = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < max => {
                    log::warn!("attempt {attempt}/{max} failed: {e}; retrying");
                    std::thread::sleep(self.backoff(attempt));
                    attempt += 1;
                }
                Err(GatewayError::Transient(message)) => {
                    return Err(GatewayError::Provider {
                        attempts: attempt,
                        message,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateLimit {
    pub max_in_flight: usize,
    pub requests_per_minute: Option<u32>,
}

impl Default for RateLimit {
    fn default() -> Self {
        Self {
            max_in_flight: 8,
            requests_per_minute: None,
        }
    }
}

struct Limiter {
    cfg: RateLimit,
    in_flight: Mutex<usize>,
    freed: Condvar,
    window: Mutex<VecDeque<Instant>>,
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("limiter lock");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

impl Limiter {
    fn new(cfg: RateLimit) -> Self {
        Self {
            cfg,
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            window: Mutex::new(VecDeque::new()),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        if let Some(rpm) = self.cfg.requests_per_minute.filter(|&r| r > 0) {
            let minute = Duration::from_secs(60);
            loop {
                let mut w = self.window.lock().expect("limiter lock");
                let now = Instant::now();
                while w.front().is_some_and(|t| now.duration_since(*t) >= minute) {
                    w.pop_front();
                }
                if w.len() < rpm as usize {
                    w.push_back(now);
                    break;
                }
                let wait = minute - now.duration_since(*w.front().expect("non-empty"));
                drop(w);
                std::thread::sleep(wait);
            }
        }
        let max = self.cfg.max_in_flight.max(1);
        let mut n = self.in_flight.lock().expect("limiter lock");
        while *n >= max {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n += 1;
        Permit(self)
    }
}

/// A backend bound to one role, with the model id sent to it.
#[derive(Clone)]
pub struct RoleBinding {
    pub backend: Arc<dyn Backend>,
    pub model_id: String,
    pub retry: RetryPolicy,
}

impl RoleBinding {
    pub fn new(backend: Arc<dyn Backend>, model_id: impl Into<String>) -> Self {
        Self {
            backend,
            model_id: model_id.into(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

/// Call and cache counters, for logging and tests.
#[derive(Debug, Default)]
pub struct GatewayStats {
    pub completions: AtomicU64,
    pub completion_cache_hits: AtomicU64,
    pub backend_completions: AtomicU64,
    pub embedded_texts: AtomicU64,
    pub embedding_cache_hits: AtomicU64,
    pub backend_embed_calls: AtomicU64,
}

impl GatewayStats {
    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::Relaxed)
    }
}

pub struct Gateway {
    score: RoleBinding,
    optimize: RoleBinding,
    embed: RoleBinding,
    responses: ResponseCache,
    embeddings: EmbeddingCache,
    limiter: Limiter,
    transcript: Option<Transcript>,
    stats: GatewayStats,
}

impl Gateway {
    pub fn builder(score: RoleBinding, optimize: RoleBinding, embed: RoleBinding) -> GatewayBuilder {
        GatewayBuilder {
            score,
            optimize,
            embed,
            responses: ResponseCache::in_memory(),
            embeddings: EmbeddingCache::in_memory(),
            rate_limit: RateLimit::default(),
            transcript: None,
        }
    }

    /// All three roles served by one backend.
    pub fn single(backend: Arc<dyn Backend>, model_prefix: &str) -> Self {
        let bind = |role: Role| RoleBinding::new(backend.clone(), format!("{model_prefix}-{}", role.as_str()));
        Self::builder(bind(Role::Score), bind(Role::Optimize), bind(Role::Embed)).build()
    }

    fn binding(&self, role: Role) -> &RoleBinding {
        match role {
            Role::Score => &self.score,
            Role::Optimize => &self.optimize,
            Role::Embed => &self.embed,
        }
    }

    pub fn model_id(&self, role: Role) -> &str {
        &self.binding(role).model_id
    }

    pub fn embedding_model_id(&self) -> &str {
        &self.embed.model_id
    }

    pub fn stats(&self) -> &GatewayStats {
        &self.stats
    }

    /// Requests callers may usefully issue at once.
    pub fn concurrency(&self) -> usize {
        self.limiter.cfg.max_in_flight.max(1)
    }

    /// A request for `role` using that role's model and default decoding.
    pub fn request(&self, role: Role, prompt: impl Into<String>) -> LlmRequest {
        LlmRequest::new(role, self.model_id(role), prompt)
    }

    fn cache_key(&self, req: &LlmRequest) -> String {
        digest_parts([self.binding(req.role).backend.name(), req.digest().as_str()])
    }

    /// Returns the completion for `req`. Temperature-0 requests are answered
    /// from cache when possible.
    pub fn complete(&self, req: &LlmRequest) -> Result<String, GatewayError> {
        self.stats.completions.fetch_add(1, Ordering::Relaxed);
        let binding = self.binding(req.role);
        let cacheable = req.decode.temperature == 0.0;
        let key = self.cache_key(req);
        if cacheable {
            if let Some(hit) = self.responses.get(&key) {
                self.stats.completion_cache_hits.fetch_add(1, Ordering::Relaxed);
                self.journal(req, &hit, true)?;
                return Ok(hit);
            }
        }
        let response = binding.retry.run(|| {
            let _permit = self.limiter.acquire();
            self.stats.backend_completions.fetch_add(1, Ordering::Relaxed);
            binding.backend.complete(req)
        })?;
        if cacheable {
            self.responses.insert(&key, &response)?;
        }
        self.journal(req, &response, false)?;
        Ok(response)
    }

    fn journal(&self, req: &LlmRequest, response: &str, cached: bool) -> Result<(), GatewayError> {
        match &self.transcript {
            Some(t) => t.record(req, response, cached),
            None => Ok(()),
        }
    }

    /// One finite vector per text, in input order, all of the same dimension.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        let model = &self.embed.model_id;
        let keys: Vec<String> = texts.iter().map(|t| EmbeddingCache::key(model, t)).collect();
        let mut out: Vec<Option<Vec<f64>>> = keys.iter().map(|k| self.embeddings.get(k)).collect();
        let hits = out.iter().filter(|v| v.is_some()).count() as u64;
        self.stats.embedded_texts.fetch_add(texts.len() as u64, Ordering::Relaxed);
        self.stats.embedding_cache_hits.fetch_add(hits, Ordering::Relaxed);

        let mut missing: Vec<usize> = Vec::new();
        for (i, v) in out.iter().enumerate() {
            if v.is_none() && !missing.iter().any(|&j| texts[j] == texts[i]) {
                missing.push(i);
            }
        }
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let vectors = self.embed.retry.run(|| {
                let _permit = self.limiter.acquire();
                self.stats.backend_embed_calls.fetch_add(1, Ordering::Relaxed);
                self.embed.backend.embed(model, &batch)
            })?;
            if vectors.len() != batch.len() {
                return Err(GatewayError::Malformed(format!(
                    "{} vectors for {} texts",
                    vectors.len(),
                    batch.len()
                )));
            }
            for (&i, v) in missing.iter().zip(vectors) {
                if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                    return Err(GatewayError::Malformed("empty or non-finite embedding".into()));
                }
                self.embeddings.insert(&keys[i], &v)?;
                if let Some(t) = &self.transcript {
                    let req = LlmRequest::new(Role::Embed, model.clone(), texts[i].clone());
                    t.record(&req, &serde_json::to_string(&v).expect("floats serialize"), false)?;
                }
            }
            for (i, slot) in out.iter_mut().enumerate() {
                if slot.is_none() {
                    *slot = self.embeddings.get(&keys[i]);
                }
            }
        }
        let out: Vec<Vec<f64>> = out.into_iter().map(|v| v.expect("filled")).collect();
        let dim = out[0].len();
        if out.iter().any(|v| v.len() != dim) {
            return Err(GatewayError::Malformed("embedding dimensions differ".into()));
        }
        Ok(out)
    }
}

pub struct GatewayBuilder {
    score: RoleBinding,
    optimize: RoleBinding,
    embed: RoleBinding,
    responses: ResponseCache,
    embeddings: EmbeddingCache,
    rate_limit: RateLimit,
    transcript: Option<Transcript>,
}

impl GatewayBuilder {
    pub fn response_cache(mut self, cache: ResponseCache) -> Self {
        self.responses = cache;
        self
    }

    pub fn embedding_cache(mut self, cache: EmbeddingCache) -> Self {
        self.embeddings = cache;
        self
    }

    pub fn rate_limit(mut self, rate_limit: RateLimit) -> Self {
        self.rate_limit = rate_limit;
        self
    }

    pub fn transcript(mut self, transcript: Transcript) -> Self {
        self.transcript = Some(transcript);
        self
    }

    pub fn build(self) -> Gateway {
        Gateway {
            score: self.score,
            optimize: self.optimize,
            embed: self.embed,
            responses: self.responses,
            embeddings: self.embeddings,
            limiter: Limiter::new(self.rate_limit),
            transcript: self.transcript,
            stats: GatewayStats::default(),
        }
    }
}
