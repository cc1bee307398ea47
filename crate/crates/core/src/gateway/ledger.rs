use std::collections::BTreeMap;
use std::ops::AddAssign;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{AgentRole, ChatResponse};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl TokenUsage {
    pub fn new(input_tokens: u64, output_tokens: u64) -> Self {
        Self {
            input_tokens,
            output_tokens,
        }
    }

    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

impl AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: Self) {
        self.input_tokens += rhs.input_tokens;
        self.output_tokens += rhs.output_tokens;
    }
}

impl std::iter::Sum for TokenUsage {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        let mut acc = TokenUsage::default();
        for u in iter {
            acc += u;
        }
        acc
    }
}

/// ceil(chars / 4)
pub fn estimate_tokens(chars: usize) -> u64 {
    chars.div_ceil(4) as u64
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub per_role: BTreeMap<AgentRole, TokenUsage>,
    pub per_question: BTreeMap<String, TokenUsage>,
    pub total: TokenUsage,
    pub calls: u64,
}

/// Cumulative token counts, safe to share between concurrent pipeline runs.
#[derive(Debug)]
pub struct UsageLedger {
    estimate_missing: bool,
    inner: Mutex<LedgerSnapshot>,
}

impl Default for UsageLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl UsageLedger {
    pub fn new() -> Self {
        Self {
            estimate_missing: true,
            inner: Mutex::new(LedgerSnapshot::default()),
        }
    }

    /// A ledger that books zero tokens for responses without usage.
    pub fn without_estimation() -> Self {
        Self {
            estimate_missing: false,
            ..Self::new()
        }
    }

    /// Tokens attributed to a response, estimating when the backend sent no usage.
    pub fn usage_of(&self, response: &ChatResponse) -> TokenUsage {
        match response.usage {
            Some(usage) => usage,
            None if self.estimate_missing => TokenUsage::new(
                estimate_tokens(response.prompt_chars),
                estimate_tokens(response.text.chars().count()),
            ),
            None => TokenUsage::default(),
        }
    }

    pub fn record_usage(
        &self,
        question_id: Option<&str>,
        role: AgentRole,
        response: &ChatResponse,
    ) -> TokenUsage {
        let usage = self.usage_of(response);
        let mut inner = self.inner.lock().expect("ledger poisoned");
        *inner.per_role.entry(role).or_default() += usage;
        if let Some(id) = question_id {
            *inner.per_question.entry(id.to_string()).or_default() += usage;
        }
        inner.total += usage;
        inner.calls += 1;
        usage
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        self.inner.lock().expect("ledger poisoned").clone()
    }
}
