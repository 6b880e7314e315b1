//! Text-generation and embedding providers behind one interface.
//!
//! [`ChatBackend`] and [`EmbeddingBackend`] are the raw provider surfaces. The
//! pipeline talks to [`Ranker`] and [`Generator`], which are implemented both by
//! LLM adapters over a chat backend and by the deterministic mocks in [`mock`].

use serde::{Deserialize, Serialize};

use crate::protocol::{ChatMessage, PromptTemplate};
use crate::types::{CandidateSet, EvalInstance};

pub mod embeddings;
pub mod http;
pub mod mock;

pub use embeddings::{load_embeddings, EmbeddingRecord, HashingEmbedder};
pub use http::{BackendConfig, HttpChatClient, HttpEmbeddingClient, RetryPolicy};
pub use mock::{
    mock_generate, mock_rank, reference_answer, Corruption, MockGenerator, MockOracleRanker, RelevanceLabels,
    ScriptedChat, MOCK_WRONG_ANSWER, REPAIRABLE_CORRUPTIONS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_name: String,
}

impl ChatRequest {
    /// Temperature-0 request, the setting used for every ranking call.
    pub fn new(model_name: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            temperature: 0.0,
            max_output_tokens: 512,
            model_name: model_name.into(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !self
            .messages
            .iter()
            .any(|m| m.role == crate::protocol::Role::User)
        {
            return Err(BackendError::InvalidRequest(
                "request needs at least one user message".into(),
            ));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest(
                "temperature must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    /// Zero when the provider omits usage accounting.
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {reason}")]
    Unavailable { attempts: u32, reason: String },
    #[error("backend rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("provider refused to answer: {0}")]
    Refusal(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got} at input {index}")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        index: usize,
    },
    #[error("malformed provider response: {0}")]
    Decode(String),
    #[error("no relevance labels for query `{0}`")]
    MissingLabels(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl BackendError {
    /// True for failures that mean the provider cannot be reached or refuses
    /// service (exhausted retries or a fail-fast 4xx).
    pub fn is_unavailable(&self) -> bool {
        matches!(
            self,
            BackendError::Unavailable { .. } | BackendError::Rejected { .. }
        )
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Identifier recorded in run manifests. Never includes credentials.
    fn describe(&self) -> String;
}

pub trait EmbeddingBackend: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError>;

    fn describe(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankerReply {
    pub raw: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Produces raw listwise-ranking text for a candidate set.
pub trait Ranker: Send + Sync {
    fn rank(&self, cs: &CandidateSet, template: &PromptTemplate)
        -> Result<RankerReply, BackendError>;

    fn describe(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Answers a query given the passages at `context` (ordinals, in order).
pub trait Generator: Send + Sync {
    fn generate(&self, inst: &EvalInstance, context: &[usize])
        -> Result<Generation, BackendError>;

    fn describe(&self) -> String;
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).chat(req)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<T: Ranker + ?Sized> Ranker for std::sync::Arc<T> {
    fn rank(
        &self,
        cs: &CandidateSet,
        template: &PromptTemplate,
    ) -> Result<RankerReply, BackendError> {
        (**self).rank(cs, template)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<T: Generator + ?Sized> Generator for std::sync::Arc<T> {
    fn generate(&self, inst: &EvalInstance, context: &[usize]) -> Result<Generation, BackendError> {
        (**self).generate(inst, context)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}
