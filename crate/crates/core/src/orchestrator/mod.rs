//! End-to-end question pipeline: normalization, retrieval, coding with repair,
//! reasoning fallback and answer formatting, with a per-question trace.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;
use tracing::{info, warn};

pub use config::{BackendConfig, EmbeddingConfig, ExecutorConfig, KnowledgeConfig, PipelineConfig};

use crate::error::{Error, Result};
use crate::gateway::{AgentRole, CallRecord, Gateway, Session, TokenUsage};
use crate::knowledge::{ExperienceEntry, KnowledgeBase, RetrievalKind, RetrievalResult};
use crate::normalize::{format_answer, normalize_question, AnswerDraft, NormalizedQuestion, RawQuestion};
use crate::solving::{attempt_with_retries, reason_directly, CodingAttempt, CodingContext, Executor};

/// Final text when neither code nor reasoning produced an answer.
pub const NO_ANSWER: &str = "[no answer]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    SolvedByCode,
    SolvedByReasoning,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub text: String,
    pub status: SolveStatus,
}

/// Which knowledge the coding agent receives.
#[derive(Debug, Clone, PartialEq)]
pub enum RetrievalPolicy {
    /// Experience when similarity reaches the threshold, documentation otherwise.
    Gated,
    /// Documentation only; the experience base is skipped.
    DocumentationOnly,
    /// Exactly this experience, regardless of similarity.
    Inject(ExperienceEntry),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: AgentRole,
    /// Microseconds since the Unix epoch.
    pub started_at_us: u64,
    pub finished_at_us: u64,
    pub calls: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub kind: RetrievalKind,
    pub keys: Vec<String>,
    pub top_score: f64,
    pub experience_score: Option<f64>,
}

impl From<&RetrievalResult> for RetrievalSummary {
    fn from(r: &RetrievalResult) -> Self {
        Self {
            kind: r.kind,
            keys: r.entries.iter().map(|e| e.key.clone()).collect(),
            top_score: r.top_score,
            experience_score: r.experience_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub question_id: Option<String>,
    pub question: String,
    pub normalized: Option<NormalizedQuestion>,
    pub retrieval: Option<RetrievalSummary>,
    pub staged_files: Vec<PathBuf>,
    pub attempts: Vec<CodingAttempt>,
    pub reasoning: Option<String>,
    pub drafts: Vec<AnswerDraft>,
    pub answer: FinalAnswer,
    pub stages: Vec<StageRecord>,
    pub usage: BTreeMap<AgentRole, TokenUsage>,
    pub total_usage: TokenUsage,
    pub errors: Vec<String>,
    /// Set when a backend, embedding or sandbox failure affected the run.
    pub infrastructure_failure: bool,
}

impl PipelineTrace {
    fn new(raw: &RawQuestion) -> Self {
        Self {
            question_id: raw.item_id.clone(),
            question: raw.text.clone(),
            normalized: None,
            retrieval: None,
            staged_files: Vec::new(),
            attempts: Vec::new(),
            reasoning: None,
            drafts: Vec::new(),
            answer: FinalAnswer {
                text: NO_ANSWER.to_string(),
                status: SolveStatus::Failed,
            },
            stages: Vec::new(),
            usage: BTreeMap::new(),
            total_usage: TokenUsage::default(),
            errors: Vec::new(),
            infrastructure_failure: false,
        }
    }

    /// Agents in invocation order; the search stage counts once.
    pub fn agent_sequence(&self) -> Vec<AgentRole> {
        let mut out = Vec::new();
        for stage in &self.stages {
            if stage.stage == AgentRole::Search {
                out.push(AgentRole::Search);
            } else {
                out.extend(stage.calls.iter().map(|c| c.role));
            }
        }
        out
    }

    pub fn call_count(&self, role: AgentRole) -> usize {
        self.agent_sequence().iter().filter(|r| **r == role).count()
    }

    /// Copy with all timestamps zeroed, for byte-stable comparisons.
    pub fn without_timestamps(&self) -> Self {
        let mut t = self.clone();
        for s in &mut t.stages {
            s.started_at_us = 0;
            s.finished_at_us = 0;
        }
        t
    }

    fn note_error(&mut self, context: &str, e: &Error) {
        if e.is_infrastructure() {
            self.infrastructure_failure = true;
        }
        self.errors.push(format!("{context}: {e}"));
    }

    fn finish(&mut self, session: &Session) {
        for call in session.calls_since(0) {
            *self.usage.entry(call.role).or_default() += call.usage;
            self.total_usage += call.usage;
        }
    }
}

fn now_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

struct StageClock {
    stage: AgentRole,
    started_at_us: u64,
    first_call: usize,
}

impl StageClock {
    fn start(stage: AgentRole, session: &Session) -> Self {
        Self {
            stage,
            started_at_us: now_us(),
            first_call: session.call_count(),
        }
    }

    fn stop(self, session: &Session, trace: &mut PipelineTrace) {
        trace.stages.push(StageRecord {
            stage: self.stage,
            started_at_us: self.started_at_us,
            finished_at_us: now_us().max(self.started_at_us),
            calls: session.calls_since(self.first_call),
        });
    }
}

/// A file to copy into the sandbox when `input_data` names an existing file.
fn staged_input(input_data: &str) -> Option<PathBuf> {
    let candidate = input_data.trim().trim_matches(|c| c == '"' || c == '\'');
    if candidate.is_empty() || candidate.contains('\n') {
        return None;
    }
    let path = Path::new(candidate);
    path.is_file().then(|| path.to_path_buf())
}

pub struct Pipeline {
    config: PipelineConfig,
    gateway: Gateway,
    knowledge: Arc<RwLock<KnowledgeBase>>,
    executor: Arc<dyn Executor>,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        gateway: Gateway,
        knowledge: KnowledgeBase,
        executor: Arc<dyn Executor>,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            gateway,
            knowledge: Arc::new(RwLock::new(knowledge)),
            executor,
        })
    }

    pub async fn from_config(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let gateway = config.build_gateway()?;
        let knowledge = config.build_knowledge().await?;
        let executor = config.build_executor()?;
        Self::new(config, gateway, knowledge, executor)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn knowledge(&self) -> &Arc<RwLock<KnowledgeBase>> {
        &self.knowledge
    }

    pub fn executor(&self) -> &Arc<dyn Executor> {
        &self.executor
    }

    pub async fn solve(&self, raw: &RawQuestion) -> (FinalAnswer, PipelineTrace) {
        self.solve_with(raw, &RetrievalPolicy::Gated).await
    }

    pub async fn solve_with(
        &self,
        raw: &RawQuestion,
        policy: &RetrievalPolicy,
    ) -> (FinalAnswer, PipelineTrace) {
        let session = self.gateway.session(raw.item_id.clone());
        let mut trace = PipelineTrace::new(raw);

        let clock = StageClock::start(AgentRole::Question, &session);
        let normalized = normalize_question(raw, &session).await;
        clock.stop(&session, &mut trace);
        let q = match normalized {
            Ok(q) => q,
            Err(e) => {
                warn!(error = %e, "question normalization failed");
                trace.note_error("question", &e);
                trace.finish(&session);
                return (trace.answer.clone(), trace);
            }
        };
        trace.normalized = Some(q.clone());

        let clock = StageClock::start(AgentRole::Search, &session);
        let retrieval = self.retrieve(&q, policy).await;
        clock.stop(&session, &mut trace);
        let retrieval = retrieval.unwrap_or_else(|e| {
            trace.note_error("search", &e);
            RetrievalResult::empty()
        });
        trace.retrieval = Some(RetrievalSummary::from(&retrieval));

        let staged: Vec<PathBuf> = staged_input(&q.input_data).into_iter().collect();
        trace.staged_files = staged.clone();
        let ctx = CodingContext {
            knowledge: &retrieval,
            executor: self.executor.as_ref(),
            staged: &staged,
            requirements: raw.coding_requirements.as_deref(),
        };
        let clock = StageClock::start(AgentRole::Coding, &session);
        let attempts = attempt_with_retries(&q, &ctx, self.config.n_retry, &session).await;
        clock.stop(&session, &mut trace);
        let solved = attempts.iter().find_map(|a| a.result.clone());
        trace.attempts = attempts;

        let (result, status) = match solved {
            Some(result) => (result, SolveStatus::SolvedByCode),
            None => {
                let clock = StageClock::start(AgentRole::Reasoning, &session);
                let reasoned = reason_directly(&q, &session).await;
                clock.stop(&session, &mut trace);
                match reasoned {
                    Ok(answer) => {
                        trace.reasoning = Some(answer.clone());
                        (answer, SolveStatus::SolvedByReasoning)
                    }
                    Err(e) => {
                        if let Some(last) = trace.attempts.last().and_then(|a| a.error.clone()) {
                            trace.errors.push(format!("coding: {last}"));
                        }
                        trace.note_error("reasoning", &e);
                        (NO_ANSWER.to_string(), SolveStatus::Failed)
                    }
                }
            }
        };

        let clock = StageClock::start(AgentRole::Answer, &session);
        let formatted =
            format_answer(q.output_format.as_deref(), &result, &session, self.config.n_check).await;
        clock.stop(&session, &mut trace);
        trace.drafts = formatted.drafts;
        trace.answer = FinalAnswer {
            text: formatted.text,
            status,
        };
        trace.finish(&session);
        info!(
            question = raw.item_id.as_deref().unwrap_or("-"),
            status = ?status,
            "question finished"
        );
        (trace.answer.clone(), trace)
    }

    async fn retrieve(&self, q: &NormalizedQuestion, policy: &RetrievalPolicy) -> Result<RetrievalResult> {
        match policy {
            RetrievalPolicy::Inject(entry) => Ok(RetrievalResult::injected(entry.clone())),
            RetrievalPolicy::Gated => {
                let kb = self.knowledge.read().await;
                kb.search(&q.refined_question, &q.graph_type, self.config.delta)
                    .await
            }
            RetrievalPolicy::DocumentationOnly => {
                let kb = self.knowledge.read().await;
                kb.search_documentation(&q.refined_question, &q.graph_type)
                    .await
            }
        }
    }

    /// Solves `items` with at most `parallelism` in flight; output keeps input order.
    pub async fn solve_batch(
        &self,
        items: &[RawQuestion],
        parallelism: usize,
    ) -> Vec<(FinalAnswer, PipelineTrace)> {
        stream::iter(items)
            .map(|raw| self.solve(raw))
            .buffered(parallelism.max(1))
            .collect()
            .await
    }
}

fn file_stem_for(trace: &PipelineTrace, index: usize) -> String {
    match &trace.question_id {
        Some(id) => id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect(),
        None => format!("{index:05}"),
    }
}

/// Writes `value` as `<dir>/<question id or index>.json` and returns the path.
pub fn write_trace_file<T: Serialize>(
    dir: impl AsRef<Path>,
    trace: &PipelineTrace,
    index: usize,
    value: &T,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let path = dir.join(format!("{}.json", file_stem_for(trace, index)));
    crate::knowledge::write_json(&path, value)?;
    Ok(path)
}
