//! Chat and embedding access over an OpenAI-compatible protocol.
//!
//! A [`ModelBackend`] only moves requests and responses. Accounting is done
//! by the free functions [`chat`] and [`embed`], which validate the request,
//! call the backend and append exactly one [`UsageRecord`] per successful
//! call to a shared [`UsageLedger`].

mod http;
mod ledger;
mod scripted;

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use ledger::{UsageLedger, UsageRecord};
pub use scripted::{ChatRule, EmbedRule, ScriptCall, ScriptFile, ScriptedBackend};

use crate::model::EmbeddingVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend returned HTTP {code}: {body}")]
    BadStatus { code: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("API key environment variable `{0}` is not set")]
    MissingApiKey(String),
    #[error("backend returned an all-zero embedding")]
    ZeroVector,
    #[error("no scripted response matches request: {0}")]
    ScriptExhausted(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub seed: Option<i64>,
    pub max_output_tokens: Option<u32>,
}

impl ChatRequest {
    /// A single-turn request carrying one user message.
    pub fn user(content: impl Into<String>, temperature: f64, seed: Option<i64>) -> Self {
        ChatRequest { messages: vec![Message::user(content)], temperature, seed, max_output_tokens: None }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        match self.messages.last() {
            None => return Err(ClientError::InvalidRequest("no messages".into())),
            Some(m) if m.role != Role::User => {
                return Err(ClientError::InvalidRequest("last message must be from the user".into()))
            }
            _ => {}
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ClientError::InvalidRequest(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.max_output_tokens == Some(0) {
            return Err(ClientError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn last_user_message(&self) -> &str {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedResponse {
    pub values: Vec<f64>,
    pub prompt_tokens: u64,
}

/// Who a call is billed to. Only optimizer spend counts as method cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsageRole {
    Optimizer,
    Target,
}

/// Connection and pricing settings for one backend.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub base_url: String,
    /// Name of the environment variable holding the API key. Empty means the
    /// endpoint needs no key (local servers).
    pub api_key_env_var: String,
    pub model: String,
    pub price_in_per_1k: f64,
    pub price_out_per_1k: f64,
    pub timeout: Duration,
    pub max_retries: u32,
}

pub const MAX_RETRIES_CAP: u32 = 5;

impl BackendConfig {
    /// A priced config with no endpoint, for scripted backends.
    pub fn offline(model: impl Into<String>, price_in_per_1k: f64, price_out_per_1k: f64) -> Self {
        BackendConfig {
            base_url: String::new(),
            api_key_env_var: String::new(),
            model: model.into(),
            price_in_per_1k,
            price_out_per_1k,
            timeout: Duration::from_secs(60),
            max_retries: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if !(self.price_in_per_1k >= 0.0 && self.price_out_per_1k >= 0.0) {
            return Err(ClientError::InvalidConfig("prices must be >= 0".into()));
        }
        if self.max_retries > MAX_RETRIES_CAP {
            return Err(ClientError::InvalidConfig(format!(
                "max_retries must be <= {MAX_RETRIES_CAP}, got {}",
                self.max_retries
            )));
        }
        if self.model.trim().is_empty() {
            return Err(ClientError::InvalidConfig("model is empty".into()));
        }
        Ok(())
    }

    pub fn cost_usd(&self, prompt_tokens: u64, completion_tokens: u64) -> f64 {
        prompt_tokens as f64 / 1000.0 * self.price_in_per_1k + completion_tokens as f64 / 1000.0 * self.price_out_per_1k
    }
}

/// A chat/embedding provider. Implementations must be shareable across tasks.
#[async_trait]
pub trait ModelBackend: Send + Sync {
    fn config(&self) -> &BackendConfig;

    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError>;

    async fn embed_text(&self, text: &str) -> Result<EmbedResponse, ClientError>;
}

pub type SharedBackend = Arc<dyn ModelBackend>;

/// Sends a chat request and records its usage under `role`.
pub async fn chat(
    backend: &dyn ModelBackend,
    request: &ChatRequest,
    role: UsageRole,
    ledger: &UsageLedger,
) -> Result<ChatResponse, ClientError> {
    request.validate()?;
    let response = backend.complete(request).await?;
    ledger.append(UsageRecord::priced(role, backend.config(), response.prompt_tokens, response.completion_tokens));
    Ok(response)
}

/// Embeds `text`; always billed to the optimizer.
pub async fn embed(
    backend: &dyn ModelBackend,
    text: &str,
    ledger: &UsageLedger,
) -> Result<EmbeddingVector, ClientError> {
    if text.is_empty() {
        return Err(ClientError::InvalidRequest("cannot embed empty text".into()));
    }
    let response = backend.embed_text(text).await?;
    let vector = EmbeddingVector::new(response.values)
        .ok_or_else(|| ClientError::MalformedResponse("empty embedding".into()))?;
    if vector.is_zero() {
        return Err(ClientError::ZeroVector);
    }
    ledger.append(UsageRecord::priced(UsageRole::Optimizer, backend.config(), response.prompt_tokens, 0));
    Ok(vector)
}

/// Token estimate used by offline backends: one token per four chars, rounded up.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}
