//! Uniform client over chat-completion style providers: multimodal messages,
//! retries, rate limiting, a content-addressed response cache, and a
//! deterministic scripted mock for tests.

mod cache;
mod http;
mod limit;
mod mock;

pub use cache::{CacheEntry, ResponseCache};
pub use http::{HttpProvider, HttpProviderConfig};
pub use limit::{Semaphore, TokenBucket};
pub use mock::{CallRecord, MockProvider, MockScript, MockScriptEntry, ScriptEntry, ScriptResponse};

use crate::digest::sha256_hex;
use crate::trajectory::Captioner;
use serde::{Deserialize, Serialize};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// One message part: text, or an image with its media type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    Image { bytes: Arc<Vec<u8>>, media_type: String },
}

impl Part {
    pub fn text(s: impl Into<String>) -> Self {
        Part::Text(s.into())
    }

    pub fn image(bytes: Vec<u8>, media_type: impl Into<String>) -> Self {
        Part::Image {
            bytes: Arc::new(bytes),
            media_type: media_type.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn user(parts: Vec<Part>) -> Self {
        ChatMessage { role: Role::User, parts }
    }

    pub fn user_text(text: impl Into<String>) -> Self {
        ChatMessage::user(vec![Part::text(text)])
    }

    pub fn assistant_text(text: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            parts: vec![Part::text(text)],
        }
    }
}

/// Canonical text view of a message list: text parts verbatim, image parts as
/// a `[screenshot]` marker. Used for golden files and mock matching.
pub fn render_messages(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for message in messages {
        for part in &message.parts {
            match part {
                Part::Text(t) => out.push_str(t),
                Part::Image { .. } => out.push_str(crate::prompts::SCREENSHOT_MARKER),
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
    pub thinking_budget_tokens: Option<u32>,
    pub n_samples: u32,
}

impl ChatRequest {
    pub fn greedy(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            model: model.into(),
            messages,
            temperature: 0.0,
            max_output_tokens: None,
            thinking_budget_tokens: None,
            n_samples: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.n_samples < 1 {
            return Err(ProviderError::Precondition("n_samples must be >= 1".into()));
        }
        if self.n_samples >= 2 && self.temperature <= 0.0 {
            return Err(ProviderError::Precondition(
                "n_samples >= 2 requires temperature > 0".into(),
            ));
        }
        if self.temperature < 0.0 {
            return Err(ProviderError::Precondition("temperature must be >= 0".into()));
        }
        if self.messages.is_empty() {
            return Err(ProviderError::Precondition("messages must be nonempty".into()));
        }
        for message in &self.messages {
            if message.parts.is_empty() {
                return Err(ProviderError::Precondition("message has no parts".into()));
            }
            if message.role != Role::User
                && message.parts.iter().any(|p| matches!(p, Part::Image { .. }))
            {
                return Err(ProviderError::Precondition(
                    "image parts are only allowed in user messages".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ChatResponse {
    /// One output text per requested sample.
    pub texts: Vec<String>,
    pub provider_meta: String,
    /// True when every sample was served from the cache.
    pub cached: bool,
    /// Cache-key digest of each sample's request.
    pub sample_digests: Vec<String>,
}

/// Content hash identifying one single-sample request against one provider.
/// Equal inputs produce equal digests; any field change (including the image
/// bytes behind a message) changes the digest.
pub fn cache_key(provider_id: &str, req: &ChatRequest, sample_index: u32) -> String {
    let messages: Vec<serde_json::Value> = req
        .messages
        .iter()
        .map(|m| {
            let parts: Vec<serde_json::Value> = m
                .parts
                .iter()
                .map(|p| match p {
                    Part::Text(t) => serde_json::json!({ "text": t }),
                    Part::Image { bytes, media_type } => serde_json::json!({
                        "image_sha256": sha256_hex(bytes),
                        "media_type": media_type,
                    }),
                })
                .collect();
            serde_json::json!({ "role": m.role, "parts": parts })
        })
        .collect();
    let canonical = serde_json::json!({
        "provider": provider_id,
        "model": req.model,
        "messages": messages,
        "temperature": req.temperature,
        "max_output_tokens": req.max_output_tokens,
        "thinking_budget_tokens": req.thinking_budget_tokens,
        "n_samples": req.n_samples,
        "sample_index": sample_index,
    });
    sha256_hex(canonical.to_string().as_bytes())
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned status {status}: {message}")]
    Api { status: u16, message: String },
    #[error("scripted failure: {0}")]
    Scripted(String),
    #[error("unmatched mock request: {prefix:?}")]
    Unmatched { prefix: String },
    #[error("cache miss for digest {digest}")]
    CacheMiss { digest: String },
    #[error("empty response from provider")]
    EmptyResponse,
    #[error("exhausted after {attempts} attempts: {source}")]
    RetriesExhausted {
        attempts: u32,
        #[source]
        source: Box<ProviderError>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl ProviderError {
    /// Precondition failures, unmatched mock requests, and cache misses are
    /// not worth retrying; everything else may be transient.
    pub fn is_retryable(&self) -> bool {
        !matches!(
            self,
            ProviderError::Precondition(_) | ProviderError::Unmatched { .. } | ProviderError::CacheMiss { .. }
        )
    }
}

/// A backing model endpoint. Implementations answer one single-sample
/// request at a time; fan-out, caching, and limits live in [`ChatClient`].
pub trait Provider: Send + Sync {
    /// Stable identity that namespaces cache keys (endpoint-level).
    fn id(&self) -> &str;
    fn complete_once(&self, req: &ChatRequest, sample_index: u32) -> Result<String, ProviderError>;
    fn supports_thinking_budget(&self) -> bool {
        false
    }
}

/// Retry schedule: exponential backoff with a cap.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            multiplier: 2.0,
            max_backoff: Duration::from_secs(10),
        }
    }
}

impl RetryPolicy {
    /// No waiting between attempts; for tests and mock runs.
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            initial_backoff: Duration::ZERO,
            multiplier: 1.0,
            max_backoff: Duration::ZERO,
        }
    }

    fn backoff_for(&self, attempt: u32) -> Duration {
        let factor = self.multiplier.powi(attempt.saturating_sub(1) as i32);
        let wait = self.initial_backoff.as_secs_f64() * factor;
        Duration::from_secs_f64(wait.min(self.max_backoff.as_secs_f64()))
    }
}

#[derive(Debug, Clone)]
pub struct RetryOutcome {
    pub response: ChatResponse,
    pub attempts: u32,
}

/// Shareable client: per-sample cache lookups, bounded in-flight calls,
/// token-bucket rate limiting.
pub struct ChatClient {
    provider: Arc<dyn Provider>,
    cache: Option<ResponseCache>,
    limiter: Option<TokenBucket>,
    gate: Option<Semaphore>,
    warnings: Mutex<Vec<String>>,
}

impl ChatClient {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        ChatClient {
            provider,
            cache: None,
            limiter: None,
            gate: None,
            warnings: Mutex::new(Vec::new()),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_rate_limit(mut self, rate_per_minute: f64) -> Self {
        self.limiter = Some(TokenBucket::new(rate_per_minute));
        self
    }

    pub fn with_max_in_flight(mut self, max_in_flight: usize) -> Self {
        self.gate = Some(Semaphore::new(max_in_flight.max(1)));
        self
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    /// Warnings accumulated since the last drain (e.g. an ignored thinking
    /// budget on a provider without the knob).
    pub fn drain_warnings(&self) -> Vec<String> {
        std::mem::take(&mut self.warnings.lock().unwrap())
    }

    fn warn(&self, message: String) {
        self.warnings.lock().unwrap().push(message);
    }

    /// Completes a request, splitting `n_samples` into independent
    /// single-sample calls keyed by sample index in the cache.
    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        req.validate()?;
        if req.thinking_budget_tokens.is_some() && !self.provider.supports_thinking_budget() {
            self.warn(format!(
                "provider {} has no thinking-budget knob; requested budget of {} tokens is recorded but not applied",
                self.provider.id(),
                req.thinking_budget_tokens.unwrap_or_default(),
            ));
        }
        let mut texts = Vec::with_capacity(req.n_samples as usize);
        let mut sample_digests = Vec::with_capacity(req.n_samples as usize);
        let mut all_cached = true;
        for sample_index in 0..req.n_samples {
            let digest = cache_key(self.provider.id(), req, sample_index);
            let cached_text = self
                .cache
                .as_ref()
                .and_then(|c| c.get(&digest))
                .and_then(|e| e.texts.into_iter().next());
            let text = match cached_text {
                Some(text) => text,
                None => {
                    all_cached = false;
                    if let Some(limiter) = &self.limiter {
                        limiter.acquire();
                    }
                    let _guard = self.gate.as_ref().map(|g| g.acquire());
                    let text = self.provider.complete_once(req, sample_index)?;
                    if let Some(cache) = &self.cache {
                        cache.put(&digest, &req.model, std::slice::from_ref(&text))?;
                    }
                    text
                }
            };
            texts.push(text);
            sample_digests.push(digest);
        }
        Ok(ChatResponse {
            texts,
            provider_meta: format!("{}/{}", self.provider.id(), req.model),
            cached: all_cached,
            sample_digests,
        })
    }

    /// Retries `complete` per the policy; returns the first success together
    /// with the attempt count, or the last error wrapped with the count.
    pub fn complete_with_retry(
        &self,
        req: &ChatRequest,
        policy: &RetryPolicy,
    ) -> Result<RetryOutcome, ProviderError> {
        let max_attempts = policy.max_attempts.max(1);
        let mut last_err = None;
        for attempt in 1..=max_attempts {
            match self.complete(req) {
                Ok(response) => return Ok(RetryOutcome { response, attempts: attempt }),
                Err(err) if err.is_retryable() && attempt < max_attempts => {
                    let wait = policy.backoff_for(attempt);
                    if !wait.is_zero() {
                        std::thread::sleep(wait);
                    }
                    last_err = Some(err);
                }
                Err(err) => {
                    return Err(ProviderError::RetriesExhausted {
                        attempts: attempt,
                        source: Box::new(err),
                    });
                }
            }
        }
        Err(ProviderError::RetriesExhausted {
            attempts: max_attempts,
            source: Box::new(last_err.unwrap_or(ProviderError::EmptyResponse)),
        })
    }
}

/// Provider that only answers from an existing cache; any miss is an error
/// naming the digest. Used by `replay`.
pub struct CacheOnlyProvider {
    id: String,
}

impl CacheOnlyProvider {
    /// `id` must equal the original provider's id so cache keys line up.
    pub fn new(id: impl Into<String>) -> Self {
        CacheOnlyProvider { id: id.into() }
    }
}

impl Provider for CacheOnlyProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete_once(&self, req: &ChatRequest, sample_index: u32) -> Result<String, ProviderError> {
        Err(ProviderError::CacheMiss {
            digest: cache_key(&self.id, req, sample_index),
        })
    }

    fn supports_thinking_budget(&self) -> bool {
        true
    }
}

/// Captioner backed by a chat provider: sends the screenshot with a fixed
/// instruction and returns the model's text.
pub struct ProviderCaptioner<'a> {
    pub client: &'a ChatClient,
    pub model: String,
}

impl Captioner for ProviderCaptioner<'_> {
    fn caption(&self, image: &[u8], media_type: &str) -> Result<String, String> {
        let req = ChatRequest::greedy(
            self.model.clone(),
            vec![ChatMessage::user(vec![
                Part::text(
                    "Describe this web page screenshot in one detailed paragraph, preserving any \
                     visible text, controls, and state that matter for judging task progress.",
                ),
                Part::image(image.to_vec(), media_type),
            ])],
        );
        let resp = self.client.complete(&req).map_err(|e| e.to_string())?;
        let text = resp.texts.into_iter().next().unwrap_or_default();
        let trimmed = text.trim().to_string();
        if trimmed.is_empty() {
            Err("empty caption".to_string())
        } else {
            Ok(trimmed)
        }
    }
}
