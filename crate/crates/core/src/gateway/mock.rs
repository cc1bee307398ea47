use std::fs;
use std::path::Path;
use std::sync::Mutex;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, ChatResponse, TokenUsage};
use crate::error::{Error, Result};

/// A scripted reply: used when `match` is a substring of the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub pattern: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_tokens: Option<u64>,
}

impl MockRule {
    pub fn new(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            response: response.into(),
            input_tokens: None,
            output_tokens: None,
        }
    }

    pub fn with_usage(mut self, input_tokens: u64, output_tokens: u64) -> Self {
        self.input_tokens = Some(input_tokens);
        self.output_tokens = Some(output_tokens);
        self
    }

    fn usage(&self) -> Option<TokenUsage> {
        match (self.input_tokens, self.output_tokens) {
            (None, None) => None,
            (i, o) => Some(TokenUsage::new(i.unwrap_or(0), o.unwrap_or(0))),
        }
    }
}

/// Deterministic backend: the first rule whose pattern occurs in the prompt wins.
///
/// Rules are stateless, so concurrent callers never interfere. Prompts are kept
/// for inspection in tests.
#[derive(Debug, Default)]
pub struct MockBackend {
    id: String,
    rules: Vec<MockRule>,
    prompts: Mutex<Vec<String>>,
}

impl MockBackend {
    pub fn new(rules: Vec<MockRule>) -> Self {
        Self {
            id: "mock".into(),
            rules,
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(Self::new(serde_json::from_str(&raw)?))
    }

    pub fn rules(&self) -> &[MockRule] {
        &self.rules
    }

    /// Every prompt received so far, in arrival order.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompt log poisoned").clone()
    }
}

#[async_trait]
impl ChatBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn send(&self, request: &ChatRequest) -> Result<ChatResponse> {
        self.prompts
            .lock()
            .expect("prompt log poisoned")
            .push(request.user_text.clone());
        let rule = self
            .rules
            .iter()
            .find(|r| request.user_text.contains(&r.pattern))
            .ok_or(Error::NoMockRule)?;
        Ok(ChatResponse {
            text: rule.response.clone(),
            usage: rule.usage(),
            prompt_chars: request.prompt_chars(),
            backend_id: self.id.clone(),
        })
    }
}
