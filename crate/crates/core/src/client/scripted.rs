//! Deterministic offline backend driven by a script of canned responses.

use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{estimate_tokens, BackendConfig, ChatRequest, ChatResponse, ClientError, EmbedResponse, ModelBackend};

/// A canned chat reply.
///
/// A rule matches when `contains` is a substring of the request's last user
/// message and, if `seed` is set, the request carries that seed. Rules are
/// tried in script order; a matching rule is consumed unless `repeat` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRule {
    #[serde(default)]
    pub contains: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<i64>,
    #[serde(default)]
    pub reply: String,
    /// When set, the call fails with a transport error carrying this text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub repeat: bool,
    #[serde(default)]
    pub delay_ms: u64,
}

impl ChatRule {
    pub fn once(contains: impl Into<String>, reply: impl Into<String>) -> Self {
        ChatRule { contains: contains.into(), seed: None, reply: reply.into(), error: None, repeat: false, delay_ms: 0 }
    }

    pub fn always(contains: impl Into<String>, reply: impl Into<String>) -> Self {
        ChatRule { repeat: true, ..Self::once(contains, reply) }
    }

    pub fn failing(contains: impl Into<String>, message: impl Into<String>) -> Self {
        ChatRule { error: Some(message.into()), ..Self::once(contains, "") }
    }

    pub fn with_seed(mut self, seed: i64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_delay(mut self, delay_ms: u64) -> Self {
        self.delay_ms = delay_ms;
        self
    }
}

/// A canned embedding, matched by substring of the input text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRule {
    #[serde(default)]
    pub contains: String,
    pub vector: Vec<f64>,
    #[serde(default)]
    pub repeat: bool,
    #[serde(default)]
    pub delay_ms: u64,
}

impl EmbedRule {
    pub fn once(contains: impl Into<String>, vector: Vec<f64>) -> Self {
        EmbedRule { contains: contains.into(), vector, repeat: false, delay_ms: 0 }
    }

    pub fn always(contains: impl Into<String>, vector: Vec<f64>) -> Self {
        EmbedRule { repeat: true, ..Self::once(contains, vector) }
    }
}

/// On-disk script format (JSON).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptFile {
    #[serde(default)]
    pub chat: Vec<ChatRule>,
    #[serde(default)]
    pub embed: Vec<EmbedRule>,
}

impl ScriptFile {
    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ClientError::InvalidConfig(format!("cannot read script {}: {e}", path.display())))?;
        serde_json::from_str(&raw)
            .map_err(|e| ClientError::InvalidConfig(format!("bad script {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptCallKind {
    Chat,
    Embed,
}

/// One call served by a scripted backend, in arrival order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptCall {
    pub kind: ScriptCallKind,
    pub input: String,
    pub seed: Option<i64>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug)]
struct State {
    chat: Vec<(ChatRule, bool)>,
    embed: Vec<(EmbedRule, bool)>,
    log: Vec<ScriptCall>,
}

#[derive(Debug)]
pub struct ScriptedBackend {
    config: BackendConfig,
    state: Mutex<State>,
}

impl ScriptedBackend {
    pub fn new(config: BackendConfig, chat: Vec<ChatRule>, embed: Vec<EmbedRule>) -> Self {
        ScriptedBackend {
            config,
            state: Mutex::new(State {
                chat: chat.into_iter().map(|r| (r, false)).collect(),
                embed: embed.into_iter().map(|r| (r, false)).collect(),
                log: Vec::new(),
            }),
        }
    }

    pub fn from_script(config: BackendConfig, script: ScriptFile) -> Self {
        Self::new(config, script.chat, script.embed)
    }

    /// Every call served so far.
    pub fn calls(&self) -> Vec<ScriptCall> {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).log.clone()
    }

    pub fn chat_calls(&self) -> usize {
        self.calls().iter().filter(|c| c.kind == ScriptCallKind::Chat).count()
    }

    pub fn embed_calls(&self) -> usize {
        self.calls().iter().filter(|c| c.kind == ScriptCallKind::Embed).count()
    }
}

fn excerpt(text: &str) -> String {
    const MAX: usize = 80;
    if text.chars().count() <= MAX {
        text.to_string()
    } else {
        let head: String = text.chars().take(MAX).collect();
        format!("{head}...")
    }
}

#[async_trait]
impl ModelBackend for ScriptedBackend {
    fn config(&self) -> &BackendConfig {
        &self.config
    }

    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let last = request.last_user_message();
        let rule = {
            let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
            let slot = state.chat.iter_mut().find(|(rule, used)| {
                !*used && last.contains(&rule.contains) && rule.seed.is_none_or(|s| request.seed == Some(s))
            });
            let Some((rule, used)) = slot else {
                return Err(ClientError::ScriptExhausted(excerpt(last)));
            };
            if !rule.repeat {
                *used = true;
            }
            let rule = rule.clone();
            let prompt_tokens = request.messages.iter().map(|m| estimate_tokens(&m.content)).sum();
            let completion_tokens = estimate_tokens(&rule.reply);
            state.log.push(ScriptCall {
                kind: ScriptCallKind::Chat,
                input: last.to_string(),
                seed: request.seed,
                prompt_tokens,
                completion_tokens,
            });
            (rule, prompt_tokens, completion_tokens)
        };
        let (rule, prompt_tokens, completion_tokens) = rule;
        if rule.delay_ms > 0 {
            tokio::time::sleep(Duration::from_millis(rule.delay_ms)).await;
        }
        if let Some(message) = rule.error {
            return Err(ClientError::Transport(message));
        }
        Ok(ChatResponse { text: rule.reply, prompt_tokens, completion_tokens })
    }

    async fn embed_text(&self, text: &str) -> Result<EmbedResponse, ClientError> {
        let (vector, delay_ms, prompt_tokens) = {
            let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
            let slot = state.embed.iter_mut().find(|(rule, used)| !*used && text.contains(&rule.contains));
            let Some((rule, used)) = slot else {
                return Err(ClientError::ScriptExhausted(excerpt(text)));
            };
            if !rule.repeat {
                *used = true;
            }
            let found = (rule.vector.clone(), rule.delay_ms, estimate_tokens(text));
            state.log.push(ScriptCall {
                kind: ScriptCallKind::Embed,
                input: text.to_string(),
                seed: None,
                prompt_tokens: found.2,
                completion_tokens: 0,
            });
            found
        };
        if delay_ms > 0 {
            tokio::time::sleep(Duration::from_millis(delay_ms)).await;
        }
        Ok(EmbedResponse { values: vector, prompt_tokens })
    }
}
