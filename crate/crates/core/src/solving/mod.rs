//! Coding agent with repair retries, and the reasoning-agent fallback.

mod exec;

use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use tracing::debug;

pub use exec::{
    parse_envelope, ErrorClass, ExecutionEnvelope, ExecutionOutcome, Executor,
    InterpreterExecutor, RunnerExecutor, StubExecutor, StubRule, DEFAULT_TIMEOUT_S,
    STREAM_CAP_BYTES,
};

use crate::error::{Error, Result};
use crate::gateway::{AgentRole, Session};
use crate::knowledge::RetrievalResult;
use crate::normalize::NormalizedQuestion;

const STDERR_TAIL_CHARS: usize = 2000;
pub const NO_CODE: &str = "no code produced";
pub const NO_OUTPUT: &str = "no output produced";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodingAttempt {
    pub trial_index: u32,
    pub code: String,
    pub result: Option<String>,
    pub error: Option<String>,
}

impl CodingAttempt {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Coding,
    Reasoning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveResult {
    pub result: String,
    pub provenance: Provenance,
    pub attempts: Vec<CodingAttempt>,
}

/// Everything the coding agent needs besides the question.
pub struct CodingContext<'a> {
    pub knowledge: &'a RetrievalResult,
    pub executor: &'a dyn Executor,
    pub staged: &'a [PathBuf],
    /// Appended to every coding prompt.
    pub requirements: Option<&'a str>,
}

/// Body of the last fenced block in `reply`, without its fence lines.
pub fn extract_code_block(reply: &str) -> Option<String> {
    let mut fences = Vec::new();
    let mut offset = 0;
    for line in reply.split_inclusive('\n') {
        if line.trim_start().starts_with("```") {
            fences.push((offset, offset + line.len()));
        }
        offset += line.len();
    }
    let blocks = fences.chunks_exact(2);
    let [(_, body_start), (close_start, _)] = blocks.last()? else {
        return None;
    };
    let body = &reply[*body_start..*close_start];
    Some(body.strip_suffix('\n').unwrap_or(body).to_string())
}

fn tail_chars(text: &str, n: usize) -> &str {
    match text.char_indices().rev().nth(n.saturating_sub(1)) {
        Some((i, _)) if n > 0 => &text[i..],
        _ => text,
    }
}

/// Rendered history of prior trials, bound to the coding template's error slot.
pub fn render_history(history: &[CodingAttempt]) -> String {
    if history.is_empty() {
        return "None".to_string();
    }
    let mut out = String::new();
    for attempt in history {
        out.push_str(&format!(
            "\nAttempt {} code:\n```python\n{}\n```\nAttempt {} error: {}\n",
            attempt.trial_index,
            attempt.code,
            attempt.trial_index,
            attempt.error.as_deref().unwrap_or("None")
        ));
    }
    out
}

fn error_text(outcome: &ExecutionOutcome) -> String {
    format!(
        "{}: {}",
        outcome.error_class.label(),
        tail_chars(&outcome.stderr, STDERR_TAIL_CHARS)
    )
}

/// One coding-agent call: prompt with the question, knowledge and all prior trials,
/// return the last fenced block of the reply.
pub async fn generate_code(
    q: &NormalizedQuestion,
    knowledge: &RetrievalResult,
    history: &[CodingAttempt],
    requirements: Option<&str>,
    session: &Session,
) -> Result<String> {
    let bindings = HashMap::from([
        ("knowledge", knowledge.render()),
        ("reformatted_problem", q.refined_question.clone()),
        ("graph_type", q.graph_type.clone()),
        ("input_data", q.input_data.clone()),
        ("output_format", q.output_format_text().to_string()),
        ("error_message", render_history(history)),
    ]);
    let mut prompt = session.render(AgentRole::Coding, &bindings)?;
    if let Some(extra) = requirements {
        prompt.push('\n');
        prompt.push_str(extra);
    }
    let reply = session.chat(AgentRole::Coding, prompt).await?;
    extract_code_block(&reply.text).ok_or(Error::NoCodeBlock)
}

/// Generate-execute-repair loop: stops at the first trial that exits cleanly with
/// output, or after `n_retry` trials.
pub async fn attempt_with_retries(
    q: &NormalizedQuestion,
    ctx: &CodingContext<'_>,
    n_retry: u32,
    session: &Session,
) -> Vec<CodingAttempt> {
    let mut attempts: Vec<CodingAttempt> = Vec::new();
    for trial_index in 1..=n_retry {
        let code = match generate_code(q, ctx.knowledge, &attempts, ctx.requirements, session).await {
            Ok(code) => code,
            Err(e) => {
                let error = match e {
                    Error::NoCodeBlock => NO_CODE.to_string(),
                    other => format!("{NO_CODE}: {other}"),
                };
                attempts.push(CodingAttempt {
                    trial_index,
                    code: String::new(),
                    result: None,
                    error: Some(error),
                });
                continue;
            }
        };
        let outcome = match ctx.executor.execute(&code, ctx.staged).await {
            Ok(outcome) => outcome,
            Err(e) => ExecutionOutcome::launch_failure(e.to_string()),
        };
        debug!(trial_index, class = ?outcome.error_class, "coding trial executed");
        let attempt = if !outcome.is_success() {
            CodingAttempt {
                trial_index,
                code,
                result: None,
                error: Some(error_text(&outcome)),
            }
        } else if outcome.stdout.trim().is_empty() {
            CodingAttempt {
                trial_index,
                code,
                result: None,
                error: Some(NO_OUTPUT.to_string()),
            }
        } else {
            CodingAttempt {
                trial_index,
                code,
                result: Some(outcome.stdout.trim_end().to_string()),
                error: None,
            }
        };
        let done = attempt.succeeded();
        attempts.push(attempt);
        if done {
            break;
        }
    }
    attempts
}

/// Text between `<answer>` and `</answer>`, or the whole reply when absent.
pub fn extract_answer(reply: &str) -> String {
    if let Some(start) = reply.find("<answer>") {
        let body = &reply[start + "<answer>".len()..];
        let end = body.find("</answer>").unwrap_or(body.len());
        return body[..end].trim().to_string();
    }
    reply.trim().to_string()
}

/// Reasoning agent: answers without code.
pub async fn reason_directly(q: &NormalizedQuestion, session: &Session) -> Result<String> {
    let bindings = HashMap::from([
        ("reformatted_problem", q.refined_question.clone()),
        ("input_data", q.input_data.clone()),
        ("graph_type", q.graph_type.clone()),
        ("output_format", q.output_format_text().to_string()),
    ]);
    let prompt = session.render(AgentRole::Reasoning, &bindings)?;
    let reply = session.chat(AgentRole::Reasoning, prompt).await?;
    let answer = extract_answer(&reply.text);
    if answer.is_empty() {
        return Err(Error::BackendRefusal);
    }
    Ok(answer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, MockBackend, MockRule};
    use crate::knowledge::ExperienceEntry;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn question() -> NormalizedQuestion {
        NormalizedQuestion {
            refined_question: "Is there a path that visits every node exactly once?".into(),
            graph_type: "undirected".into(),
            input_data: "Nodes: [0..6], Edges: [0,3] [0,1] [1,6] [2,4] [3,5] [3,6] [4,5]".into(),
            output_format: Some("Yes. The path can be: 1,4,8.".into()),
        }
    }

    fn hamilton_experience() -> RetrievalResult {
        RetrievalResult::injected(ExperienceEntry {
            question: "In an undirected graph, the edges are: (0,1) ... (5,6)".into(),
            answer: "Yes. The path can be: 0, 1, 6, 5.".into(),
            thought: "This is finding a Hamiltonian path.".into(),
            code: "def hamiltonian_path(graph, path):\n    pass".into(),
            problem_type: "hamilton".into(),
        })
    }

    fn fence(code: &str) -> String {
        format!("Here you go:\n```python\n{code}\n```\n")
    }

    fn setup(rules: Vec<MockRule>) -> (Gateway, Arc<MockBackend>) {
        let backend = Arc::new(MockBackend::new(rules));
        (Gateway::new(backend.clone()), backend)
    }

    #[test]
    fn extraction_rules() {
        assert_eq!(extract_code_block("```python\nprint(1)\n```").as_deref(), Some("print(1)"));
        assert_eq!(
            extract_code_block("first\n```\na\n```\nthen fixed:\n```py\nb\nc\n```\n").as_deref(),
            Some("b\nc")
        );
        assert_eq!(extract_code_block("here is prose only"), None);
        assert_eq!(extract_code_block("```python\nunterminated"), None);
    }

    proptest! {
        #[test]
        fn single_block_round_trip(
            body in "[a-zA-Z0-9 =():+\n\t'\"#_.,-]{0,200}",
            prose in "[a-zA-Z .,]{0,40}",
        ) {
            let reply = format!("{prose}\n```python\n{body}\n```\n{prose}");
            prop_assert_eq!(extract_code_block(&reply), Some(body));
        }
    }

    #[test]
    fn stderr_tail() {
        assert_eq!(tail_chars("abcdef", 3), "def");
        assert_eq!(tail_chars("ab", 3), "ab");
        let long = "é".repeat(3000);
        assert_eq!(tail_chars(&long, STDERR_TAIL_CHARS).chars().count(), 2000);
    }

    #[tokio::test]
    async fn first_trial_prompt_has_experience_and_no_history() {
        let (gw, backend) = setup(vec![MockRule::new("", fence("print(1)"))]);
        let code = generate_code(&question(), &hamilton_experience(), &[], None, &gw.session(None))
            .await
            .unwrap();
        assert_eq!(code, "print(1)");
        let prompt = &backend.prompts()[0];
        assert!(prompt.contains("def hamiltonian_path(graph, path):"));
        assert!(prompt.contains("Here is the error message: None\n"));
        assert!(!prompt.contains("Attempt 1"));
    }

    #[tokio::test]
    async fn second_trial_prompt_carries_history() {
        let (gw, backend) = setup(vec![MockRule::new("", fence("print(2)"))]);
        let history = vec![CodingAttempt {
            trial_index: 1,
            code: "print(undefined)".into(),
            result: None,
            error: Some("runtime error: NameError: name 'undefined' is not defined".into()),
        }];
        generate_code(&question(), &hamilton_experience(), &history, None, &gw.session(None))
            .await
            .unwrap();
        let prompt = &backend.prompts()[0];
        assert!(prompt.contains("print(undefined)"));
        assert!(prompt.contains("NameError: name 'undefined' is not defined"));
    }

    #[tokio::test]
    async fn prose_reply_is_no_code_block() {
        let (gw, _) = setup(vec![MockRule::new("", "here is prose only")]);
        let err = generate_code(&question(), &RetrievalResult::empty(), &[], None, &gw.session(None))
            .await
            .unwrap_err();
        assert!(matches!(err, Error::NoCodeBlock));
    }

    async fn run_trials(stub: StubExecutor, n_retry: u32) -> (Vec<CodingAttempt>, Arc<MockBackend>) {
        // Each reply's code depends on which earlier codes appear in the prompt.
        let (gw, backend) = setup(vec![
            MockRule::new("print('v2')", fence("print('v3')")),
            MockRule::new("print('v1')", fence("print('v2')")),
            MockRule::new("", fence("print('v1')")),
        ]);
        let knowledge = RetrievalResult::empty();
        let ctx = CodingContext {
            knowledge: &knowledge,
            executor: &stub,
            staged: &[],
            requirements: None,
        };
        let attempts = attempt_with_retries(&question(), &ctx, n_retry, &gw.session(None)).await;
        (attempts, backend)
    }

    #[tokio::test]
    async fn success_on_first_trial() {
        let stub = StubExecutor::new().on("v1", ExecutionOutcome::success("0, 1, 6, 3, 5, 4, 2\n"));
        let (attempts, backend) = run_trials(stub, 3).await;
        assert_eq!(attempts.len(), 1);
        assert_eq!(attempts[0].result.as_deref(), Some("0, 1, 6, 3, 5, 4, 2"));
        assert_eq!(backend.prompts().len(), 1);
    }

    #[tokio::test]
    async fn fail_fail_succeed() {
        let stub = StubExecutor::new()
            .on("v3", ExecutionOutcome::success("42\n"))
            .on("v2", ExecutionOutcome::failure(1, "Traceback\nIndexError: list index out of range"))
            .on("v1", ExecutionOutcome::failure(1, "  File \"main.py\", line 1\nSyntaxError: invalid syntax"));
        let (attempts, backend) = run_trials(stub, 3).await;
        assert_eq!(attempts.len(), 3);
        assert!(attempts[0].error.as_deref().unwrap().starts_with("syntax error: "));
        assert!(attempts[1].error.as_deref().unwrap().starts_with("runtime error: "));
        assert!(attempts[2].succeeded());
        assert_eq!(attempts[2].result.as_deref(), Some("42"));
        // the n-th prompt holds exactly n-1 prior codes
        let prompts = backend.prompts();
        for (n, prompt) in prompts.iter().enumerate() {
            assert_eq!(prompt.matches("Attempt ").count(), 2 * n, "prompt {n}");
        }
        assert!(prompts[2].contains("IndexError"));
    }

    #[tokio::test]
    async fn all_trials_fail() {
        let stub = StubExecutor::new();
        let (attempts, _) = run_trials(stub, 3).await;
        assert_eq!(attempts.len(), 3);
        assert!(attempts.iter().all(|a| !a.succeeded()));
    }

    #[tokio::test]
    async fn silent_success_is_an_error() {
        let stub = StubExecutor::new()
            .on("v1", ExecutionOutcome::success("  \n"))
            .on("v2", ExecutionOutcome::success("done"));
        let (attempts, _) = run_trials(stub, 3).await;
        assert_eq!(attempts[0].error.as_deref(), Some(NO_OUTPUT));
        assert_eq!(attempts.len(), 2);
    }

    #[tokio::test]
    async fn missing_code_block_counts_as_failed_trial() {
        let (gw, _) = setup(vec![MockRule::new("", "I cannot write code today")]);
        let stub = StubExecutor::new();
        let knowledge = RetrievalResult::empty();
        let ctx = CodingContext {
            knowledge: &knowledge,
            executor: &stub,
            staged: &[],
            requirements: Some("Print the configuration as JSON."),
        };
        let attempts = attempt_with_retries(&question(), &ctx, 2, &gw.session(None)).await;
        assert_eq!(attempts.len(), 2);
        assert_eq!(attempts[0].error.as_deref(), Some(NO_CODE));
        assert!(stub.executed().is_empty());
    }

    #[tokio::test]
    async fn reasoning_reply() {
        let (gw, backend) = setup(vec![MockRule::new("", "Yes. The path can be: 0, 1, 6, 5.")]);
        let mut q = question();
        q.output_format = None;
        let answer = reason_directly(&q, &gw.session(None)).await.unwrap();
        assert_eq!(answer, "Yes. The path can be: 0, 1, 6, 5.");
        assert!(backend.prompts()[0].contains("Output_Format: None."));

        let (gw, _) = setup(vec![MockRule::new("", "thinking...\n<answer>7</answer>")]);
        assert_eq!(reason_directly(&q, &gw.session(None)).await.unwrap(), "7");

        let (gw, _) = setup(vec![MockRule::new("", "")]);
        assert!(matches!(
            reason_directly(&q, &gw.session(None)).await,
            Err(Error::BackendRefusal)
        ));
        let (gw, _) = setup(vec![MockRule::new("", "<answer> </answer>")]);
        assert!(matches!(
            reason_directly(&q, &gw.session(None)).await,
            Err(Error::BackendRefusal)
        ));
    }
}
