//! Experience-base construction: candidate collection on a training set, utility
//! scoring on a validation set and per-type selection.

use std::collections::BTreeMap;
use std::path::Path;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::error::{Error, Result};
use crate::harness::exact_match;
use crate::knowledge::{ExperienceEntry, KnowledgeBase};
use crate::normalize::RawQuestion;
use crate::orchestrator::{Pipeline, RetrievalPolicy, SolveStatus};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemRecord {
    #[serde(default)]
    pub id: String,
    pub question: String,
    #[serde(rename = "answer")]
    pub gold_answer: String,
    #[serde(rename = "type")]
    pub problem_type: String,
}

/// Reads `{id, question, answer, type}` records, one per line; blank lines are skipped.
pub fn load_problems(path: impl AsRef<Path>) -> Result<Vec<ProblemRecord>> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for (n, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = n + 1;
        let record: ProblemRecord = serde_json::from_str(line).map_err(|e| Error::Schema {
            index: line_no,
            message: e.to_string(),
        })?;
        for (name, value) in [
            ("question", &record.question),
            ("answer", &record.gold_answer),
            ("type", &record.problem_type),
        ] {
            if value.trim().is_empty() {
                return Err(Error::Schema {
                    index: line_no,
                    message: format!("`{name}` is empty"),
                });
            }
        }
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverOutput {
    pub answer: String,
    pub thought: String,
    /// Code that produced the answer; `None` when it came from the reasoning agent.
    pub code: Option<String>,
}

#[async_trait]
pub trait Solver: Send + Sync {
    /// Solves `record` with `experience` as the only retrieved experience, or with
    /// the experience base disabled when `None`.
    async fn solve(&self, record: &ProblemRecord, experience: Option<&ExperienceEntry>)
        -> Result<SolverOutput>;
}

#[async_trait]
impl Solver for Pipeline {
    async fn solve(
        &self,
        record: &ProblemRecord,
        experience: Option<&ExperienceEntry>,
    ) -> Result<SolverOutput> {
        let policy = match experience {
            Some(e) => RetrievalPolicy::Inject(e.clone()),
            None => RetrievalPolicy::DocumentationOnly,
        };
        let raw = RawQuestion::new(record.question.clone()).with_id(record.id.clone());
        let (answer, trace) = self.solve_with(&raw, &policy).await;
        if answer.status == SolveStatus::Failed && trace.infrastructure_failure {
            return Err(Error::Execution(trace.errors.join("; ")));
        }
        let thought = trace
            .normalized
            .as_ref()
            .map(|q| q.refined_question.clone())
            .unwrap_or_default();
        let code = match answer.status {
            SolveStatus::SolvedByCode => trace
                .attempts
                .iter()
                .find(|a| a.succeeded())
                .map(|a| a.code.clone()),
            _ => None,
        };
        Ok(SolverOutput {
            answer: answer.text,
            thought,
            code,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    /// Position in collection order; also the key of its utility score.
    pub id: usize,
    pub train_index: usize,
    pub record_id: String,
    pub entry: ExperienceEntry,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub n_exp: usize,
    pub pools: BTreeMap<String, Vec<Candidate>>,
}

impl CandidatePool {
    pub fn get(&self, problem_type: &str) -> &[Candidate] {
        self.pools.get(problem_type).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.pools.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn candidates(&self) -> impl Iterator<Item = &Candidate> {
        self.pools.values().flatten()
    }
}

/// Candidate id to number of validation records answered correctly.
pub type UtilityScores = BTreeMap<usize, u32>;

/// Runs the solver over `train` in order, keeping correct answers as candidates
/// until each type holds `n_exp` of them.
pub async fn collect_candidates(
    train: &[ProblemRecord],
    solver: &dyn Solver,
    n_exp: usize,
) -> CandidatePool {
    let mut pool = CandidatePool {
        n_exp,
        pools: BTreeMap::new(),
    };
    let mut next_id = 0;
    for (train_index, record) in train.iter().enumerate() {
        if pool.get(&record.problem_type).len() >= n_exp {
            continue;
        }
        let output = match solver.solve(record, None).await {
            Ok(o) => o,
            Err(e) => {
                warn!(record = %record.id, error = %e, "solver failed during collection");
                continue;
            }
        };
        if exact_match(&output.answer, &record.gold_answer) == 0 {
            continue;
        }
        let Some(code) = output.code.filter(|c| !c.trim().is_empty()) else {
            warn!(record = %record.id, "correct answer without code; not kept as a candidate");
            continue;
        };
        pool.pools
            .entry(record.problem_type.clone())
            .or_default()
            .push(Candidate {
                id: next_id,
                train_index,
                record_id: record.id.clone(),
                entry: ExperienceEntry {
                    question: record.question.clone(),
                    answer: record.gold_answer.clone(),
                    thought: output.thought,
                    code,
                    problem_type: record.problem_type.clone(),
                },
            });
        next_id += 1;
    }
    info!(candidates = pool.len(), types = pool.pools.len(), "candidate collection finished");
    pool
}

/// Solves every (validation record, same-type candidate) pair with the candidate
/// injected, at most `parallelism` at a time.
pub async fn score_utilities(
    valid: &[ProblemRecord],
    pool: &CandidatePool,
    solver: &dyn Solver,
    parallelism: usize,
) -> UtilityScores {
    let mut scores: UtilityScores = pool.candidates().map(|c| (c.id, 0)).collect();
    let pairs = valid
        .iter()
        .flat_map(|r| pool.get(&r.problem_type).iter().map(move |c| (r, c)));
    let mut results = stream::iter(pairs)
        .map(|(record, candidate)| async move {
            let correct = match solver.solve(record, Some(&candidate.entry)).await {
                Ok(o) => exact_match(&o.answer, &record.gold_answer) == 1,
                Err(e) => {
                    warn!(record = %record.id, candidate = candidate.id, error = %e, "solver failed during scoring");
                    false
                }
            };
            (candidate.id, correct)
        })
        .buffer_unordered(parallelism.max(1));
    while let Some((id, correct)) = results.next().await {
        if correct {
            *scores.entry(id).or_default() += 1;
        }
    }
    scores
}

/// Highest-utility candidate per type; the earliest training position wins ties.
pub fn select_best(pool: &CandidatePool, scores: &UtilityScores) -> Vec<ExperienceEntry> {
    let mut out = Vec::new();
    for candidates in pool.pools.values() {
        let mut best: Option<(&Candidate, u32)> = None;
        for c in candidates {
            let u = scores.get(&c.id).copied().unwrap_or(0);
            let better = match best {
                None => true,
                Some((b, bu)) => u > bu || (u == bu && c.train_index < b.train_index),
            };
            if better {
                best = Some((c, u));
            }
        }
        if let Some((c, _)) = best {
            out.push(c.entry.clone());
        }
    }
    out
}

pub async fn install(kb: &mut KnowledgeBase, selected: &[ExperienceEntry]) -> Result<()> {
    for entry in selected {
        kb.add_experience(entry.clone()).await?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionReport {
    pub pool: CandidatePool,
    pub utilities: UtilityScores,
    pub selected: Vec<ExperienceEntry>,
}

pub async fn run_collection(
    train: &[ProblemRecord],
    valid: &[ProblemRecord],
    solver: &dyn Solver,
    n_exp: usize,
    parallelism: usize,
) -> CollectionReport {
    let pool = collect_candidates(train, solver, n_exp).await;
    let utilities = score_utilities(valid, &pool, solver, parallelism).await;
    let selected = select_best(&pool, &utilities);
    CollectionReport {
        pool,
        utilities,
        selected,
    }
}
