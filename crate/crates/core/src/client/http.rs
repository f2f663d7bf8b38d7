use std::time::Duration;

use async_trait::async_trait;
use rand::Rng;
use serde::Deserialize;
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{BackendConfig, ChatRequest, ChatResponse, ClientError, EmbedResponse, ModelBackend};

const DEFAULT_BACKOFF_BASE: Duration = Duration::from_millis(500);
const BODY_EXCERPT_CHARS: usize = 200;

/// Client for OpenAI-compatible `/chat/completions` and `/embeddings`.
///
/// The API key is read from the configured environment variable on every
/// call, so a config can be loaded before the key is exported.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    config: BackendConfig,
    client: reqwest::Client,
    backoff_base: Duration,
}

#[derive(Debug, Deserialize)]
struct CompletionBody {
    choices: Vec<CompletionChoice>,
    #[serde(default)]
    usage: Option<UsageBody>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    message: Option<ChoiceMessage>,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct UsageBody {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Debug, Deserialize)]
struct EmbeddingBody {
    data: Vec<EmbeddingDatum>,
    #[serde(default)]
    usage: Option<UsageBody>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

enum Attempt {
    Done(Value),
    Retry(String),
    Fatal(ClientError),
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, ClientError> {
        config.validate()?;
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ClientError::InvalidConfig(e.to_string()))?;
        Ok(HttpBackend { config, client, backoff_base: DEFAULT_BACKOFF_BASE })
    }

    /// Overrides the first retry delay (doubling afterwards).
    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn api_key(&self) -> Result<Option<String>, ClientError> {
        let var = &self.config.api_key_env_var;
        if var.is_empty() {
            return Ok(None);
        }
        match std::env::var(var) {
            Ok(key) if !key.is_empty() => Ok(Some(key)),
            _ => Err(ClientError::MissingApiKey(var.clone())),
        }
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.backoff_base.saturating_mul(1 << attempt.min(16));
        let jitter = rand::thread_rng().gen_range(0.5..=1.0);
        base.mul_f64(jitter)
    }

    async fn post_json(&self, path: &str, body: &Value) -> Result<Value, ClientError> {
        let key = self.api_key()?;
        let url = self.endpoint(path);
        let mut last_failure = String::new();

        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let delay = self.backoff(attempt - 1);
                debug!(%url, attempt, ?delay, "retrying");
                tokio::time::sleep(delay).await;
            }
            match self.attempt(&url, body, key.as_deref()).await {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(why) => {
                    warn!(%url, attempt, %why, "retryable failure");
                    last_failure = why;
                }
            }
        }
        Err(ClientError::Transport(format!("{} attempt(s) failed, last: {last_failure}", self.config.max_retries + 1)))
    }

    async fn attempt(&self, url: &str, body: &Value, key: Option<&str>) -> Attempt {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status();
        let text = match resp.text().await {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        if !status.is_success() {
            return Attempt::Fatal(ClientError::BadStatus {
                code: status.as_u16(),
                body: text.chars().take(BODY_EXCERPT_CHARS).collect(),
            });
        }
        match serde_json::from_str(&text) {
            Ok(v) => Attempt::Done(v),
            Err(e) => Attempt::Fatal(ClientError::MalformedResponse(e.to_string())),
        }
    }
}

#[async_trait]
impl ModelBackend for HttpBackend {
    fn config(&self) -> &BackendConfig {
        &self.config
    }

    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let mut body = json!({
            "model": self.config.model,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        if let Some(max) = request.max_output_tokens {
            body["max_tokens"] = json!(max);
        }
        let value = self.post_json("chat/completions", &body).await?;
        let parsed: CompletionBody =
            serde_json::from_value(value).map_err(|e| ClientError::MalformedResponse(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message)
            .and_then(|m| m.content)
            .ok_or_else(|| ClientError::MalformedResponse("missing choices[0].message.content".into()))?;
        let usage = parsed.usage.unwrap_or_default();
        Ok(ChatResponse { text, prompt_tokens: usage.prompt_tokens, completion_tokens: usage.completion_tokens })
    }

    async fn embed_text(&self, text: &str) -> Result<EmbedResponse, ClientError> {
        let body = json!({ "model": self.config.model, "input": text });
        let value = self.post_json("embeddings", &body).await?;
        let parsed: EmbeddingBody =
            serde_json::from_value(value).map_err(|e| ClientError::MalformedResponse(e.to_string()))?;
        let values = parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| ClientError::MalformedResponse("missing data[0].embedding".into()))?;
        Ok(EmbedResponse { values, prompt_tokens: parsed.usage.unwrap_or_default().prompt_tokens })
    }
}
