//! Blocking chat-completions and embeddings clients.
//!
//! Both speak the de-facto `/chat/completions` and `/embeddings` JSON schemas.
//! Transient failures (transport errors, timeouts, 429, 5xx) are retried with
//! exponential backoff and full jitter; other 4xx responses fail immediately.

use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, EmbeddingBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub base_delay_ms: u64,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay_ms: 1000,
            factor: 2.0,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Upper bound of the sleep before retry number `attempt` (1-based).
    pub fn ceiling(&self, attempt: u32) -> Duration {
        let exp = self.factor.powi(attempt.saturating_sub(1) as i32);
        Duration::from_secs_f64(self.base_delay_ms as f64 / 1000.0 * exp)
    }

    /// Full jitter: uniform in `[0, ceiling]`.
    pub fn delay(&self, attempt: u32) -> Duration {
        let ceiling = self.ceiling(attempt);
        if ceiling.is_zero() {
            return ceiling;
        }
        ceiling.mul_f64(rand::rng().random_range(0.0..=1.0))
    }
}

/// Provider configuration, loadable from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    pub embedding_endpoint: Option<String>,
    pub embedding_model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub concurrency: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    pub embed_batch_size: usize,
    pub max_output_tokens: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4".into(),
            embedding_endpoint: None,
            embedding_model: None,
            api_key_env: "ADARANK_API_KEY".into(),
            concurrency: 8,
            timeout_secs: 120,
            retry: RetryPolicy::default(),
            embed_batch_size: 1000,
            max_output_tokens: 512,
        }
    }
}

impl BackendConfig {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| BackendError::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| BackendError::Config(e.to_string()))?
        };
        if cfg.concurrency == 0 || cfg.embed_batch_size == 0 || cfg.retry.max_attempts == 0 {
            return Err(BackendError::Config(
                "concurrency, embed_batch_size and retry.max_attempts must be positive".into(),
            ));
        }
        Ok(cfg)
    }

    /// Hex SHA-256 of the JSON config. The config never holds the key itself.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Counting semaphore capping in-flight requests.
#[derive(Debug)]
pub struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("limiter poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("limiter poisoned") += 1;
        self.0.freed.notify_one();
    }
}

enum Attempt<T> {
    Done(T),
    Retry(String),
    Fail(BackendError),
}

struct Transport {
    agent: ureq::Agent,
    api_key: Option<String>,
    retry: RetryPolicy,
    limiter: Limiter,
}

impl Transport {
    fn new(cfg: &BackendConfig) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build();
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            tracing::warn!(var = %cfg.api_key_env, "no API key in environment; sending unauthenticated requests");
        }
        Self {
            agent: ureq::Agent::new_with_config(config),
            api_key,
            retry: cfg.retry.clone(),
            limiter: Limiter::new(cfg.concurrency),
        }
    }

    fn post_once(&self, url: &str, body: &str) -> Attempt<Value> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("transport error: {e}")),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading body: {e}")),
        };
        match status {
            200..=299 => match serde_json::from_str(&text) {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fail(BackendError::Decode(e.to_string())),
            },
            429 | 408 => Attempt::Retry(format!("status {status}")),
            500..=599 => Attempt::Retry(format!("status {status}: {}", snippet(&text))),
            _ => Attempt::Fail(BackendError::Rejected {
                status,
                body: snippet(&text),
            }),
        }
    }

    /// POSTs `body`, retrying transient failures. Returns the JSON body and the
    /// number of attempts used.
    fn post(&self, url: &str, body: &Value) -> Result<(Value, u32), BackendError> {
        let body = body.to_string();
        let _permit = self.limiter.acquire();
        let mut last = String::new();
        for attempt in 1..=self.retry.max_attempts {
            match self.post_once(url, &body) {
                Attempt::Done(v) => return Ok((v, attempt)),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(reason) => {
                    tracing::debug!(attempt, %reason, "transient backend failure");
                    last = reason;
                    if attempt < self.retry.max_attempts {
                        std::thread::sleep(self.retry.delay(attempt));
                    }
                }
            }
        }
        Err(BackendError::Unavailable {
            attempts: self.retry.max_attempts,
            reason: last,
        })
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(500).collect()
}

pub struct HttpChatClient {
    endpoint: String,
    model: String,
    transport: Transport,
}

impl HttpChatClient {
    pub fn new(cfg: &BackendConfig) -> Self {
        Self {
            endpoint: cfg.endpoint.clone(),
            model: cfg.model.clone(),
            transport: Transport::new(cfg),
        }
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    /// Like [`ChatBackend::chat`] but also reports how many attempts were made.
    pub fn chat_counted(&self, req: &ChatRequest) -> Result<(ChatResponse, u32), BackendError> {
        req.validate()?;
        let body = json!({
            "model": req.model_name,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        let started = Instant::now();
        let (value, attempts) = self.transport.post(&self.endpoint, &body)?;
        let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
        let resp = decode_chat(&value, latency_ms)?;
        Ok((resp, attempts))
    }
}

fn decode_chat(value: &Value, latency_ms: f64) -> Result<ChatResponse, BackendError> {
    let choice = value
        .pointer("/choices/0")
        .ok_or_else(|| BackendError::Decode("response has no choices".into()))?;
    if let Some(refusal) = choice.pointer("/message/refusal").and_then(Value::as_str) {
        return Err(BackendError::Refusal(refusal.to_string()));
    }
    if choice.get("finish_reason").and_then(Value::as_str) == Some("content_filter") {
        return Err(BackendError::Refusal(
            "response withheld by provider content filter".into(),
        ));
    }
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Decode("choice has no message content".into()))?;
    let usage = |k: &str| {
        value
            .pointer(&format!("/usage/{k}"))
            .and_then(Value::as_u64)
            .unwrap_or(0)
    };
    Ok(ChatResponse {
        text: text.to_string(),
        prompt_tokens: usage("prompt_tokens"),
        completion_tokens: usage("completion_tokens"),
        latency_ms,
    })
}

impl ChatBackend for HttpChatClient {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.chat_counted(req).map(|(r, _)| r)
    }

    fn describe(&self) -> String {
        format!("http-chat:{}@{}", self.model, self.endpoint)
    }
}

pub struct HttpEmbeddingClient {
    endpoint: String,
    model: String,
    batch_size: usize,
    transport: Transport,
}

impl HttpEmbeddingClient {
    pub fn new(cfg: &BackendConfig) -> Result<Self, BackendError> {
        let endpoint = cfg
            .embedding_endpoint
            .clone()
            .ok_or_else(|| BackendError::Config("embedding_endpoint is not set".into()))?;
        Ok(Self {
            endpoint,
            model: cfg
                .embedding_model
                .clone()
                .unwrap_or_else(|| "text-embedding-ada-002".into()),
            batch_size: cfg.embed_batch_size.max(1),
            transport: Transport::new(cfg),
        })
    }

    fn embed_batch(&self, batch: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        let body = json!({ "model": self.model, "input": batch });
        let (value, _) = self.transport.post(&self.endpoint, &body)?;
        let data = value
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Decode("embedding response has no data".into()))?;
        if data.len() != batch.len() {
            return Err(BackendError::Decode(format!(
                "expected {} embeddings, got {}",
                batch.len(),
                data.len()
            )));
        }
        let mut out: Vec<Option<Vec<f32>>> = vec![None; batch.len()];
        for (pos, item) in data.iter().enumerate() {
            let index = item
                .get("index")
                .and_then(Value::as_u64)
                .map(|i| i as usize)
                .unwrap_or(pos);
            let vector = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| BackendError::Decode("embedding item has no vector".into()))?
                .iter()
                .map(|x| x.as_f64().map(|f| f as f32))
                .collect::<Option<Vec<f32>>>()
                .ok_or_else(|| BackendError::Decode("non-numeric embedding component".into()))?;
            let slot = out
                .get_mut(index)
                .ok_or_else(|| BackendError::Decode(format!("embedding index {index} out of range")))?;
            *slot = Some(vector);
        }
        out.into_iter()
            .map(|v| v.ok_or_else(|| BackendError::Decode("missing embedding index".into())))
            .collect()
    }
}

impl EmbeddingBackend for HttpEmbeddingClient {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::InvalidRequest("empty embedding batch".into()));
        }
        let mut vectors = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            vectors.extend(self.embed_batch(chunk)?);
        }
        super::embeddings::check_dimensions(&vectors)?;
        Ok(vectors)
    }

    fn describe(&self) -> String {
        format!("http-embed:{}@{}", self.model, self.endpoint)
    }
}
