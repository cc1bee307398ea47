//! OpenAI-compatible `/chat/completions` client.

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::warn;

use super::{ChatBackend, ChatRequest, ChatResponse, TokenUsage};
use crate::error::{Error, Result};

pub const ENV_API_BASE: &str = "LLM_API_BASE";
pub const ENV_API_KEY: &str = "LLM_API_KEY";
pub const ENV_MODEL: &str = "LLM_MODEL";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpenAiConfig {
    pub api_base: String,
    #[serde(default)]
    pub api_key: String,
    pub model: String,
    /// Retries after the first request for transport failures and HTTP 5xx/429.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// First backoff delay; doubles on each retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_s")]
    pub request_timeout_s: u64,
}

fn default_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    1000
}

fn default_timeout_s() -> u64 {
    120
}

impl OpenAiConfig {
    pub fn new(api_base: impl Into<String>, api_key: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            api_base: api_base.into(),
            api_key: api_key.into(),
            model: model.into(),
            max_retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            request_timeout_s: default_timeout_s(),
        }
    }

    /// Reads `LLM_API_BASE`, `LLM_API_KEY` and `LLM_MODEL`.
    pub fn from_env() -> Result<Self> {
        let var = |name: &str| {
            std::env::var(name).map_err(|_| Error::Config(format!("environment variable {name} not set")))
        };
        Ok(Self::new(var(ENV_API_BASE)?, var(ENV_API_KEY)?, var(ENV_MODEL)?))
    }
}

pub struct OpenAiBackend {
    config: OpenAiConfig,
    id: String,
    client: reqwest::Client,
}

#[derive(Debug, Deserialize)]
struct CompletionBody {
    #[serde(default)]
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Debug, Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

enum Attempt {
    Done(ChatResponse),
    Retry(String),
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Result<Self> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_s))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            id: format!("openai:{}", config.model),
            config,
            client,
        })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.api_base.trim_end_matches('/'))
    }

    fn body(&self, request: &ChatRequest) -> serde_json::Value {
        let mut messages = Vec::new();
        if !request.system_text.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_text}));
        }
        messages.push(json!({"role": "user", "content": request.user_text}));
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "stream": false,
        })
    }

    async fn attempt(&self, request: &ChatRequest) -> Result<Attempt> {
        let sent = self
            .client
            .post(self.endpoint())
            .bearer_auth(&self.config.api_key)
            .json(&self.body(request))
            .send()
            .await;
        let response = match sent {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        let status = response.status();
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(Error::Auth {
                status: status.as_u16(),
            });
        }
        if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Ok(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = response.text().await.unwrap_or_default();
            return Err(Error::Transport(format!("HTTP {status}: {text}")));
        }
        let body: CompletionBody = match response.json().await {
            Ok(b) => b,
            Err(e) => return Ok(Attempt::Retry(format!("malformed body: {e}"))),
        };
        let text = body
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        Ok(Attempt::Done(ChatResponse {
            text,
            usage: body
                .usage
                .map(|u| TokenUsage::new(u.prompt_tokens, u.completion_tokens)),
            prompt_chars: request.prompt_chars(),
            backend_id: self.id.clone(),
        }))
    }
}

#[async_trait]
impl ChatBackend for OpenAiBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn send(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut retries = 0;
        loop {
            match self.attempt(request).await? {
                Attempt::Done(response) => return Ok(response),
                Attempt::Retry(reason) if retries < self.config.max_retries => {
                    warn!(%reason, retry = retries + 1, "chat request failed, backing off");
                    tokio::time::sleep(delay).await;
                    delay *= 2;
                    retries += 1;
                }
                Attempt::Retry(reason) => {
                    return Err(Error::Transport(format!(
                        "{reason} (after {} attempts)",
                        retries + 1
                    )))
                }
            }
        }
    }
}
