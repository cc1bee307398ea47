//! Chat-completion backends, prompt templates and token accounting.

mod ledger;
mod mock;
mod openai;
mod template;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

pub use ledger::{estimate_tokens, LedgerSnapshot, TokenUsage, UsageLedger};
pub use mock::{MockBackend, MockRule};
pub use openai::{OpenAiBackend, OpenAiConfig, ENV_API_BASE, ENV_API_KEY, ENV_MODEL};
pub use template::{render_prompt, PromptTemplate, TemplateSet};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Question,
    Search,
    Coding,
    Reasoning,
    Answer,
}

impl AgentRole {
    pub const ALL: [AgentRole; 5] = [
        AgentRole::Question,
        AgentRole::Search,
        AgentRole::Coding,
        AgentRole::Reasoning,
        AgentRole::Answer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Question => "question",
            AgentRole::Search => "search",
            AgentRole::Coding => "coding",
            AgentRole::Reasoning => "reasoning",
            AgentRole::Answer => "answer",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f32,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    pub fn new(user_text: impl Into<String>) -> Self {
        Self {
            system_text: String::new(),
            user_text: user_text.into(),
            temperature: 0.0,
            max_output_tokens: 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_text.is_empty() {
            return Err(Error::InvalidRequest("user_text is empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(Error::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn prompt_chars(&self) -> usize {
        self.system_text.chars().count() + self.user_text.chars().count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    /// Usage as reported by the backend; `None` when the backend sent none.
    pub usage: Option<TokenUsage>,
    /// Character count of the prompt, kept for token estimation.
    pub prompt_chars: usize,
    pub backend_id: String,
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;

    async fn send(&self, request: &ChatRequest) -> Result<ChatResponse>;
}

/// Validates the request, calls the backend and rejects empty completions.
pub async fn complete(backend: &dyn ChatBackend, request: &ChatRequest) -> Result<ChatResponse> {
    request.validate()?;
    let response = backend.send(request).await?;
    if response.text.trim().is_empty() {
        return Err(Error::BackendRefusal);
    }
    Ok(response)
}

/// Sampling settings shared by every agent call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub temperature: f32,
    pub max_output_tokens: u32,
}

impl Default for Generation {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 4096,
        }
    }
}

/// Shared handle to a backend, the templates and the global ledger.
#[derive(Clone)]
pub struct Gateway {
    pub backend: Arc<dyn ChatBackend>,
    pub templates: Arc<TemplateSet>,
    pub ledger: Arc<UsageLedger>,
    pub generation: Generation,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            templates: Arc::new(TemplateSet::defaults()),
            ledger: Arc::new(UsageLedger::new()),
            generation: Generation::default(),
        }
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = Arc::new(templates);
        self
    }

    pub fn with_generation(mut self, generation: Generation) -> Self {
        self.generation = generation;
        self
    }

    pub fn session(&self, question_id: Option<String>) -> Session {
        Session {
            gateway: self.clone(),
            question_id,
            calls: Mutex::new(Vec::new()),
        }
    }
}

/// One chat call as seen by a pipeline run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub seq: usize,
    pub role: AgentRole,
    pub usage: TokenUsage,
}

/// Per-run view of the gateway: renders templates, records every call both in the
/// shared ledger and in a local call log that the trace is built from.
pub struct Session {
    gateway: Gateway,
    question_id: Option<String>,
    calls: Mutex<Vec<CallRecord>>,
}

impl Session {
    pub fn question_id(&self) -> Option<&str> {
        self.question_id.as_deref()
    }

    pub fn render(&self, role: AgentRole, bindings: &HashMap<&str, String>) -> Result<String> {
        self.gateway.templates.for_role(role)?.render(bindings)
    }

    pub async fn chat(&self, role: AgentRole, prompt: String) -> Result<ChatResponse> {
        let request = ChatRequest {
            system_text: String::new(),
            user_text: prompt,
            temperature: self.gateway.generation.temperature,
            max_output_tokens: self.gateway.generation.max_output_tokens,
        };
        request.validate()?;
        let response = self.gateway.backend.send(&request).await?;
        let usage = self
            .gateway
            .ledger
            .record_usage(self.question_id.as_deref(), role, &response);
        {
            let mut calls = self.calls.lock().expect("call log poisoned");
            let seq = calls.len();
            calls.push(CallRecord { seq, role, usage });
        }
        // Logged before the refusal check.
        if response.text.trim().is_empty() {
            return Err(Error::BackendRefusal);
        }
        Ok(response)
    }

    /// Number of calls recorded so far; used to slice the log per stage.
    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("call log poisoned").len()
    }

    pub fn calls_since(&self, start: usize) -> Vec<CallRecord> {
        self.calls.lock().expect("call log poisoned")[start..].to_vec()
    }
}
